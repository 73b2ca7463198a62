//! Rectangle probabilities for multivariate normal and multivariate t
//! distributions with a correlation matrix `R`, by randomized quasi-Monte
//! Carlo on the separation-of-variables transform (randomly shifted Richtmyer
//! lattices, baker's periodization).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{invalid, Error, Result};
use crate::Alternative;

/// Degrees of freedom: `Asymptotic` selects the normal distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Df {
    Asymptotic,
    Finite(f64),
}

impl Df {
    pub fn is_asymptotic(self) -> bool {
        matches!(self, Df::Asymptotic) || matches!(self, Df::Finite(v) if !v.is_finite())
    }

    /// Marginal CDF.
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            Df::Finite(v) if v.is_finite() => {
                if x == f64::INFINITY {
                    1.0
                } else if x == f64::NEG_INFINITY {
                    0.0
                } else {
                    StudentsT::new(0.0, 1.0, v).expect("positive df").cdf(x)
                }
            }
            _ => norm_cdf(x),
        }
    }

    pub fn quantile(self, p: f64) -> f64 {
        match self {
            Df::Finite(v) if v.is_finite() => StudentsT::new(0.0, 1.0, v).expect("positive df").inverse_cdf(p),
            _ => norm_quantile(p),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MvnOptions {
    /// Target absolute error (3 standard errors of the shift average).
    pub tol: f64,
    pub seed: u64,
    pub max_points: usize,
}

impl Default for MvnOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            seed: 20_210_601,
            max_points: 4_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probability {
    pub value: f64,
    pub error: f64,
    /// False when `max_points` was reached before the target error.
    pub converged: bool,
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

#[inline]
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

const PSD_TOL: f64 = 1e-8;
const N_SHIFTS: usize = 12;
const ERR_FACTOR: f64 = 3.0;

/// Lower-triangular factor of a positive semidefinite matrix. Columns whose
/// pivot falls below `PSD_TOL` are set to zero (linear dependence).
fn semidefinite_cholesky(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = r.nrows();
    let mut l = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut d = r[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -PSD_TOL {
            return Err(Error::NotPsd);
        }
        if d <= PSD_TOL {
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..m {
            let mut s = r[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky factor of `R` with the variables reordered so that at each step
/// the coordinate with the smallest expected conditional interval probability
/// comes next (Genz-Bretz prioritization). Returns the factor and the
/// permuted limits.
fn prioritized_cholesky(r: &DMatrix<f64>, lower: &[f64], upper: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let m = r.nrows();
    let mut sigma = r.clone();
    let mut a = lower.to_vec();
    let mut b = upper.to_vec();
    let mut l = DMatrix::<f64>::zeros(m, m);
    let mut y = vec![0.0; m];
    for i in 0..m {
        let mut best = (i, f64::INFINITY);
        for j in i..m {
            let s: f64 = (0..i).map(|k| l[(j, k)] * y[k]).sum();
            let v = sigma[(j, j)] - (0..i).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
            let width = if v > PSD_TOL {
                let sd = v.sqrt();
                norm_cdf((b[j] - s) / sd) - norm_cdf((a[j] - s) / sd)
            } else {
                2.0
            };
            if width < best.1 {
                best = (j, width);
            }
        }
        let j = best.0;
        if j != i {
            sigma.swap_rows(i, j);
            sigma.swap_columns(i, j);
            l.swap_rows(i, j);
            a.swap(i, j);
            b.swap(i, j);
        }
        let d = sigma[(i, i)] - (0..i).map(|k| l[(i, k)] * l[(i, k)]).sum::<f64>();
        if d < -PSD_TOL {
            return Err(Error::NotPsd);
        }
        if d <= PSD_TOL {
            y[i] = 0.0;
            continue;
        }
        let lii = d.sqrt();
        l[(i, i)] = lii;
        for row in i + 1..m {
            let s: f64 = (0..i).map(|k| l[(row, k)] * l[(i, k)]).sum();
            l[(row, i)] = (sigma[(row, i)] - s) / lii;
        }
        // conditional mean of the truncated standard normal
        let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
        let (lo, hi) = ((a[i] - s) / lii, (b[i] - s) / lii);
        let mass = norm_cdf(hi) - norm_cdf(lo);
        y[i] = if mass > 1e-300 {
            (norm_pdf(lo) - norm_pdf(hi)) / mass
        } else {
            0.0
        };
    }
    Ok((l, a, b))
}

fn norm_pdf(x: f64) -> f64 {
    if x.is_finite() {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    } else {
        0.0
    }
}

/// Square roots of the first primes, the lattice generators.
fn richtmyer(dim: usize) -> Vec<f64> {
    let mut primes = Vec::with_capacity(dim);
    let mut c = 2u64;
    while primes.len() < dim {
        if (2..c).take_while(|d| d * d <= c).all(|d| !c.is_multiple_of(d)) {
            primes.push((c as f64).sqrt().fract());
        }
        c += 1;
    }
    primes
}

/// `sqrt(chi2_v^{-1}(Phi(z)) / v)` tabulated on a grid in `z` and evaluated by
/// cubic interpolation.
struct ChiScale {
    z0: f64,
    step: f64,
    values: Vec<f64>,
}

impl ChiScale {
    const Z_MAX: f64 = 8.5;
    const STEP: f64 = 0.01;

    fn new(nu: f64) -> Self {
        let chi = ChiSquared::new(nu).expect("positive df");
        let n = (2.0 * Self::Z_MAX / Self::STEP).round() as usize + 1;
        let values = (0..n)
            .map(|i| {
                let z = -Self::Z_MAX + i as f64 * Self::STEP;
                (chi.inverse_cdf(norm_cdf(z)) / nu).sqrt()
            })
            .collect();
        Self {
            z0: -Self::Z_MAX,
            step: Self::STEP,
            values,
        }
    }

    fn eval(&self, u: f64) -> f64 {
        let z = norm_quantile(u.clamp(1e-300, 1.0 - 1e-16));
        let x = ((z - self.z0) / self.step).clamp(1.0, (self.values.len() - 3) as f64);
        let i = x.floor() as usize;
        let t = x - i as f64;
        let (p0, p1, p2, p3) = (
            self.values[i - 1],
            self.values[i],
            self.values[i + 1],
            self.values[i + 2],
        );
        // Catmull-Rom
        p1 + 0.5 * t * (p2 - p0 + t * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + t * (3.0 * (p1 - p2) + p3 - p0)))
    }
}

/// Reusable integrator for one correlation matrix and df.
pub struct MvIntegrator {
    r: DMatrix<f64>,
    df: Df,
    chi: Option<ChiScale>,
    opts: MvnOptions,
}

impl MvIntegrator {
    pub fn new(r: &DMatrix<f64>, df: Df, opts: MvnOptions) -> Result<Self> {
        if !r.is_square() || r.nrows() == 0 {
            return invalid("correlation matrix must be square and nonempty");
        }
        if let Df::Finite(v) = df {
            if !(v > 0.0) {
                return invalid("degrees of freedom must be positive");
            }
        }
        // validates PSD once up front
        semidefinite_cholesky(r)?;
        let chi = match df {
            Df::Finite(v) if v.is_finite() => Some(ChiScale::new(v)),
            _ => None,
        };
        Ok(Self {
            r: r.clone(),
            df,
            chi,
            opts,
        })
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    /// `P(lower <= X <= upper)`; infinite limits allowed.
    pub fn prob(&self, lower: &[f64], upper: &[f64]) -> Result<Probability> {
        let m = self.dim();
        if lower.len() != m || upper.len() != m {
            return invalid("limit vectors do not match the dimension");
        }
        if lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
            return invalid("lower limits must be below upper limits");
        }
        if m == 1 {
            let v = self.df.cdf(upper[0]) - self.df.cdf(lower[0]);
            return Ok(Probability {
                value: v.clamp(0.0, 1.0),
                error: 0.0,
                converged: true,
            });
        }

        let (l, a, b) = prioritized_cholesky(&self.r, lower, upper)?;

        let t_dim = usize::from(self.chi.is_some());
        let dim = m - 1 + t_dim;
        let gen = richtmyer(dim.max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);

        let mut n = 256usize;
        let mut used = 0usize;
        // inverse-variance weighted combination across rounds
        let (mut est, mut var) = (0.0, f64::INFINITY);
        loop {
            let shifts: Vec<Vec<f64>> = (0..N_SHIFTS)
                .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
                .collect();
            let vals: Vec<f64> = shifts
                .par_iter()
                .map(|shift| {
                    let mut y = vec![0.0; m];
                    let mut x = vec![0.0; dim];
                    let mut sum = 0.0;
                    for k in 1..=n {
                        for d in 0..dim {
                            let u = (k as f64 * gen[d] + shift[d]).fract();
                            x[d] = (2.0 * u - 1.0).abs();
                        }
                        // antithetic pair
                        sum += self.integrand(&l, &a, &b, &x, t_dim, &mut y);
                        for xd in x.iter_mut() {
                            *xd = 1.0 - *xd;
                        }
                        sum += self.integrand(&l, &a, &b, &x, t_dim, &mut y);
                    }
                    sum / (2 * n) as f64
                })
                .collect();
            used += 2 * n * N_SHIFTS;
            let mean = vals.iter().sum::<f64>() / N_SHIFTS as f64;
            let v = vals.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / ((N_SHIFTS * (N_SHIFTS - 1)) as f64);
            if var.is_infinite() {
                est = mean;
                var = v;
            } else if v + var > 0.0 {
                let w = var / (var + v);
                est += w * (mean - est);
                var = var * v / (var + v);
            } else {
                est = mean;
                var = 0.0;
            }
            let error = ERR_FACTOR * var.sqrt();
            if error <= self.opts.tol {
                return Ok(Probability {
                    value: est.clamp(0.0, 1.0),
                    error,
                    converged: true,
                });
            }
            if used >= self.opts.max_points {
                return Ok(Probability {
                    value: est.clamp(0.0, 1.0),
                    error,
                    converged: false,
                });
            }
            n = (n * 2).min((self.opts.max_points - used) / (2 * N_SHIFTS)).max(1);
        }
    }

    fn integrand(&self, l: &DMatrix<f64>, a: &[f64], b: &[f64], x: &[f64], t_dim: usize, y: &mut [f64]) -> f64 {
        let m = a.len();
        let scale = match &self.chi {
            Some(chi) => chi.eval(x[0]),
            None => 1.0,
        };
        let mut f = 1.0;
        for i in 0..m {
            let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
            let lii = l[(i, i)];
            let (ai, bi) = (a[i] * scale, b[i] * scale);
            if lii > 0.0 {
                let lo = if ai.is_finite() {
                    norm_cdf((ai - s) / lii)
                } else if ai < 0.0 {
                    0.0
                } else {
                    1.0
                };
                let hi = if bi.is_finite() {
                    norm_cdf((bi - s) / lii)
                } else if bi > 0.0 {
                    1.0
                } else {
                    0.0
                };
                let w = hi - lo;
                if w <= 0.0 {
                    return 0.0;
                }
                f *= w;
                if i + 1 < m {
                    let u = lo + x[t_dim + i] * w;
                    y[i] = norm_quantile(u.clamp(1e-300, 1.0 - 1e-16));
                }
            } else {
                // Dependent coordinate: its value is fixed by the previous ones.
                let slack = 1e-10 * (1.0 + s.abs());
                if s < ai - slack || s > bi + slack {
                    return 0.0;
                }
                y[i] = 0.0;
            }
        }
        f
    }

    /// `P(max_i oriented(X_i) <= q)` for the given alternative.
    pub fn max_cdf(&self, q: f64, alternative: Alternative) -> Result<Probability> {
        let m = self.dim();
        let (lo, hi) = match alternative {
            Alternative::Greater => (vec![f64::NEG_INFINITY; m], vec![q; m]),
            Alternative::Less => (vec![-q; m], vec![f64::INFINITY; m]),
            Alternative::TwoSided => {
                if q <= 0.0 {
                    return Ok(Probability {
                        value: 0.0,
                        error: 0.0,
                        converged: true,
                    });
                }
                (vec![-q; m], vec![q; m])
            }
        };
        self.prob(&lo, &hi)
    }

    /// `q` such that `P(max_i oriented(X_i) <= q) = level`.
    pub fn equicoordinate_quantile(&self, level: f64, alternative: Alternative) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return invalid("level must lie in (0, 1)");
        }
        let m = self.dim() as f64;
        let one_tail = |p: f64| match alternative {
            Alternative::TwoSided => self.df.quantile(1.0 - (1.0 - p) / 2.0),
            _ => self.df.quantile(p),
        };
        // The max is bracketed by the marginal and the Bonferroni quantile.
        let f = |q: f64| -> Result<f64> { Ok(self.max_cdf(q, alternative)?.value - level) };
        let (mut a, mut b) = (one_tail(level) - 1e-3, one_tail(1.0 - (1.0 - level) / m) + 1e-3);
        let (mut fa, mut fb) = (f(a)?, f(b)?);
        if fa >= 0.0 {
            return Ok(a);
        }
        if fb <= 0.0 {
            return Ok(b);
        }
        // Illinois variant of regula falsi
        let mut side = 0i8;
        let mut c = 0.5 * (a + b);
        for _ in 0..60 {
            c = (a * fb - b * fa) / (fb - fa);
            let fc = f(c)?;
            if fc.abs() < 1e-6 || b - a < 1e-6 {
                break;
            }
            if fc < 0.0 {
                a = c;
                fa = fc;
                if side == -1 {
                    fb *= 0.5;
                }
                side = -1;
            } else {
                b = c;
                fb = fc;
                if side == 1 {
                    fa *= 0.5;
                }
                side = 1;
            }
        }
        Ok(c)
    }
}

/// One-shot rectangle probability.
pub fn mv_rectangle_prob(
    r: &DMatrix<f64>,
    lower: &[f64],
    upper: &[f64],
    df: Df,
    opts: &MvnOptions,
) -> Result<Probability> {
    MvIntegrator::new(r, df, opts.clone())?.prob(lower, upper)
}

pub fn equicoordinate_quantile(
    r: &DMatrix<f64>,
    df: Df,
    level: f64,
    alternative: Alternative,
    opts: &MvnOptions,
) -> Result<f64> {
    MvIntegrator::new(r, df, opts.clone())?.equicoordinate_quantile(level, alternative)
}
