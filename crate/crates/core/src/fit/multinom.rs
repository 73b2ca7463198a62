use nalgebra::{DMatrix, DVector};

use super::{sym_inverse, EffectBlock, FitResult};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::mvn::Df;

const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 10;

/// Baseline-category logit model on grouped counts:
/// `log(pi_gj / pi_g,ref) = alpha_j + beta_jg` with `beta_j,control = 0`.
/// Parameters come in one block of length `G` per non-reference category:
/// `(alpha_j, beta_j2, ..., beta_jG)`.
#[derive(Debug, Clone)]
pub struct MultinomialModel {
    counts: Vec<Vec<f64>>,
    levels: Vec<i64>,
    /// Position of the reference category within `levels`.
    reference: usize,
}

impl MultinomialModel {
    pub fn from_dataset(d: &Dataset, ref_level: Option<i64>) -> Result<Self> {
        let table = d.collapse();
        let observed: Vec<usize> = (0..table.grades.len())
            .filter(|&j| table.counts.iter().any(|row| row[j] > 0))
            .collect();
        if observed.len() < 2 {
            return invalid("multinomial fit needs at least two observed categories");
        }
        let levels: Vec<i64> = observed.iter().map(|&j| table.grades[j]).collect();
        let reference = match ref_level {
            Some(r) => levels
                .iter()
                .position(|&l| l == r)
                .ok_or_else(|| crate::Error::Invalid(format!("reference level {r} not observed")))?,
            None => 0,
        };
        let counts = table
            .counts
            .iter()
            .map(|row| observed.iter().map(|&j| row[j] as f64).collect())
            .collect();
        Ok(Self {
            counts,
            levels,
            reference,
        })
    }

    fn n_groups(&self) -> usize {
        self.counts.len()
    }

    /// Non-reference categories, in level order.
    fn others(&self) -> Vec<usize> {
        (0..self.levels.len()).filter(|&j| j != self.reference).collect()
    }

    pub fn n_params(&self) -> usize {
        (self.levels.len() - 1) * self.n_groups()
    }

    fn idx(&self, block: usize, g: usize) -> usize {
        block * self.n_groups() + g
    }

    /// Linear predictors for group `g`, one per non-reference category.
    fn etas(&self, phi: &[f64], g: usize) -> Vec<f64> {
        (0..self.levels.len() - 1)
            .map(|b| phi[self.idx(b, 0)] + if g > 0 { phi[self.idx(b, g)] } else { 0.0 })
            .collect()
    }

    /// Category probabilities (non-reference first, then reference) and the
    /// log-normalizer.
    fn probs(&self, phi: &[f64], g: usize) -> (Vec<f64>, f64) {
        let eta = self.etas(phi, g);
        let mx = eta.iter().cloned().fold(0.0f64, f64::max);
        let denom = (-mx).exp() + eta.iter().map(|e| (e - mx).exp()).sum::<f64>();
        let log_norm = mx + denom.ln();
        (eta.iter().map(|e| (e - log_norm).exp()).collect(), log_norm)
    }

    pub fn loglik(&self, phi: &[f64]) -> f64 {
        let others = self.others();
        (0..self.n_groups())
            .map(|g| {
                let (_, log_norm) = self.probs(phi, g);
                let eta = self.etas(phi, g);
                let row = &self.counts[g];
                let mut ll = -row[self.reference] * log_norm;
                for (b, &j) in others.iter().enumerate() {
                    ll += row[j] * (eta[b] - log_norm);
                }
                ll
            })
            .sum()
    }

    pub fn derivatives(&self, phi: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.n_params();
        let nb = self.levels.len() - 1;
        let others = self.others();
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for g in 0..self.n_groups() {
            let (pi, _) = self.probs(phi, g);
            let total: f64 = self.counts[g].iter().sum();
            // design row x_g = (1, e_g)
            let cols: Vec<usize> = if g > 0 { vec![0, g] } else { vec![0] };
            for b in 0..nb {
                let resid = self.counts[g][others[b]] - total * pi[b];
                for &c in &cols {
                    grad[self.idx(b, c)] += resid;
                }
                for b2 in 0..nb {
                    let w = total * pi[b] * (f64::from(u8::from(b == b2)) - pi[b2]);
                    for &c in &cols {
                        for &c2 in &cols {
                            hess[(self.idx(b, c), self.idx(b2, c2))] -= w;
                        }
                    }
                }
            }
        }
        (grad, hess)
    }

    /// Pearson X^2 over subjects divided by `n (J - 1) - p`.
    pub fn pearson_dispersion(&self, phi: &[f64]) -> f64 {
        let others = self.others();
        let mut x2 = 0.0;
        let mut n = 0.0;
        for g in 0..self.n_groups() {
            let (pi, _) = self.probs(phi, g);
            let pref = 1.0 - pi.iter().sum::<f64>();
            let total: f64 = self.counts[g].iter().sum();
            n += total;
            let mut cat = |count: f64, p: f64| {
                if p > 0.0 {
                    x2 += (count * (1.0 - p).powi(2) + (total - count) * p * p) / p;
                }
            };
            cat(self.counts[g][self.reference], pref);
            for (b, &j) in others.iter().enumerate() {
                cat(self.counts[g][j], pi[b]);
            }
        }
        let df = n * (self.levels.len() - 1) as f64 - self.n_params() as f64;
        if df > 0.0 {
            x2 / df
        } else {
            1.0
        }
    }

    fn start(&self) -> Vec<f64> {
        let mut phi = vec![0.0; self.n_params()];
        let others = self.others();
        let tot = |j: usize| self.counts.iter().map(|r| r[j]).sum::<f64>();
        let r = tot(self.reference);
        for (b, &j) in others.iter().enumerate() {
            phi[self.idx(b, 0)] = ((tot(j) + 0.5) / (r + 0.5)).ln();
        }
        phi
    }

    fn category_label(&self, j: usize) -> String {
        format!("C{}", self.levels[j])
    }
}

#[derive(Debug, Clone, Default)]
pub struct MultinomialOptions {
    pub ref_level: Option<i64>,
    /// Scale the covariance by the Pearson dispersion instead of 1.
    pub overall_dispersion: bool,
}

/// Newton-Raphson with step halving. Separated cells drift towards infinity
/// until the log-likelihood stabilizes; they are then flagged.
pub fn fit_multinomial(d: &Dataset, opts: &MultinomialOptions) -> Result<FitResult> {
    let model = MultinomialModel::from_dataset(d, opts.ref_level)?;
    let mut phi = model.start();
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
            None => neg.lu().solve(&grad).unwrap_or_else(|| grad.clone()),
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
                if rel < 1e-13 {
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
    let p = phi.len();
    let dispersion = if opts.overall_dispersion {
        model.pearson_dispersion(&phi)
    } else {
        1.0
    };
    let cov = sym_inverse(&(-hess)).unwrap_or_else(|| DMatrix::from_element(p, p, f64::INFINITY)) * dispersion;

    let reference = model.category_label(model.reference);
    let others = model.others();
    let mut names = Vec::with_capacity(p);
    let mut blocks = Vec::with_capacity(others.len());
    for (b, &j) in others.iter().enumerate() {
        let tag = format!("{}/{}", model.category_label(j), reference);
        names.push(format!("{tag}:(Intercept)"));
        names.extend(d.groups()[1..].iter().map(|g| format!("{tag}:group{g}")));
        blocks.push(EffectBlock {
            prefix: format!("{tag}: "),
            group_coef: (0..d.n_groups()).map(|g| (g > 0).then(|| model.idx(b, g))).collect(),
        });
    }
    let mut fit = FitResult {
        coef_names: names,
        coef: phi,
        cov,
        df_residual: Df::Asymptotic,
        dispersion,
        converged,
        iterations,
        loglik: Some(ll),
        separated: vec![],
        warnings: vec![],
        blocks,
    };
    if !converged {
        fit.warnings
            .push(format!("Newton iterations did not converge in {iterations} steps"));
    }
    fit.detect_separation();
    Ok(fit)
}
