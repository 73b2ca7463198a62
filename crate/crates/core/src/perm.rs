//! Conditional permutation test with a max-type statistic taken jointly over
//! contrast rows and endpoint columns.
//!
//! For subjects `i = 1..n` with contrast-transformed group indicators `g_i`
//! (length `p`) and endpoint values `h_i` (length `q`), the linear statistic
//! `T = sum_i g_i h_i^T` has closed-form mean and covariance under random
//! relabelling of groups. Components are standardized with these moments and
//! the null distribution of their maximum is obtained by permuting group
//! labels, either exhaustively or by seeded Monte Carlo.
//!
//! Components are indexed `j = c * q + e` (contrast-major).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrasts::ContrastMatrix;
use crate::data::{BinarizedMatrix, Dataset};
use crate::error::{invalid, Error, Result};
use crate::Alternative;

/// Relative conditional-variance floor below which a component is degenerate.
pub const VAR_EPS: f64 = 1e-12;

/// Default ceiling on distinct label arrangements for exact enumeration.
pub const DEFAULT_EXACT_THRESHOLD: u64 = 2_000_000;

pub const DEFAULT_REPLICATES: usize = 10_000;

/// Slack applied when comparing resampled statistics against observed ones,
/// so that arrangements tied with the observed one are counted.
const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermMode {
    Exact,
    MonteCarlo,
    Auto,
}

/// Parses `auto`, `on` (exact) or `off` (Monte Carlo).
pub fn parse_exact(s: &str) -> Result<PermMode> {
    match s {
        "auto" => Ok(PermMode::Auto),
        "on" | "exact" => Ok(PermMode::Exact),
        "off" | "montecarlo" => Ok(PermMode::MonteCarlo),
        other => Err(Error::Invalid(format!("unknown exact mode `{other}`"))),
    }
}

#[derive(Debug, Clone)]
pub struct PermOptions {
    pub alternative: Alternative,
    pub replicates: usize,
    pub seed: u64,
    pub mode: PermMode,
    pub exact_threshold: u64,
}

impl Default for PermOptions {
    fn default() -> Self {
        Self {
            alternative: Alternative::Greater,
            replicates: DEFAULT_REPLICATES,
            seed: 0,
            mode: PermMode::Auto,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
        }
    }
}

/// Observed linear statistic with its conditional moments.
#[derive(Debug, Clone)]
pub struct LinearStatistic {
    pub t: DVector<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n_contrasts: usize,
    pub n_endpoints: usize,
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermutationResult {
    pub contrast_labels: Vec<String>,
    pub endpoint_labels: Vec<String>,
    /// Contrast of group means per component (e.g. difference in proportions).
    pub estimate: Vec<f64>,
    /// Standardized statistic `(T - mu) / sd`; `NaN` for degenerate components.
    pub z: Vec<f64>,
    pub raw_p: Vec<f64>,
    pub adjusted_p: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub mode: PermMode,
    /// Monte Carlo replicates, or number of distinct arrangements when exact.
    pub replicates: u64,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl PermutationResult {
    pub fn index(&self, contrast: usize, endpoint: usize) -> usize {
        contrast * self.endpoint_labels.len() + endpoint
    }
}

/// Count of distinct group-label arrangements, `n! / prod(n_i!)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermCount {
    Finite(u128),
    Overflow,
}

impl PermCount {
    pub fn within(self, threshold: u64) -> bool {
        matches!(self, PermCount::Finite(c) if c <= threshold as u128)
    }
}

impl std::fmt::Display for PermCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PermCount::Finite(c) => write!(f, "{c}"),
            PermCount::Overflow => write!(f, "too large"),
        }
    }
}

/// Multinomial coefficient built from successive binomials, saturating on
/// overflow.
pub fn count_permutations(group_sizes: &[usize]) -> PermCount {
    let mut total: u128 = 1;
    let mut n: u128 = 0;
    for &size in group_sizes {
        for k in 1..=size as u128 {
            n += 1;
            // total * n / k is integral; divide first to delay overflow.
            let g = gcd(n, k);
            let (num, den) = (n / g, k / g);
            debug_assert_eq!(total % den, 0);
            total /= den;
            total = match total.checked_mul(num) {
                Some(t) => t,
                None => return PermCount::Overflow,
            };
        }
    }
    PermCount::Finite(total)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Conditional mean and covariance of `T = sum_i g_i h_i^T` under permutation
/// of the rows of `h` relative to `g`. `g` is `n x p`, `h` is `n x q`.
pub fn conditional_moments(g: &DMatrix<f64>, h: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = g.nrows();
    assert_eq!(n, h.nrows(), "g and h must have the same number of rows");
    assert!(n >= 2, "conditional moments need at least two subjects");
    let nf = n as f64;
    let (p, q) = (g.ncols(), h.ncols());

    let eh: DVector<f64> = h.row_sum().transpose() / nf;
    let centered = DMatrix::from_fn(n, q, |i, e| h[(i, e)] - eh[e]);
    let vh = centered.transpose() * &centered / nf;
    let gsum: DVector<f64> = g.row_sum().transpose();
    let s = g.transpose() * g;
    let ggt = &gsum * gsum.transpose();

    let mu = DVector::from_fn(p * q, |j, _| gsum[j / q] * eh[j % q]);
    let a = s * (nf / (nf - 1.0)) - ggt / (nf - 1.0);
    let sigma = a.kronecker(&vh);
    (mu, sigma)
}

/// Linear statistic for a dataset, contrast matrix and endpoint columns.
pub fn linear_statistic(d: &Dataset, k: &ContrastMatrix, y: &BinarizedMatrix) -> Result<LinearStatistic> {
    let prep = Prepared::new(d, k, y)?;
    Ok(prep.linear_statistic())
}

/// Standardized components for the chosen alternative (degenerate ones `NaN`).
pub fn standardized_stats(ls: &LinearStatistic, alternative: Alternative) -> Vec<f64> {
    (0..ls.t.len())
        .map(|j| {
            if ls.degenerate[j] {
                f64::NAN
            } else {
                alternative.orient((ls.t[j] - ls.mu[j]) / ls.sigma[(j, j)].sqrt())
            }
        })
        .collect()
}

/// Everything the resampling loop needs, in a canonical subject order.
struct Prepared {
    labels: Vec<usize>,
    /// Row-major `n x q` endpoint values.
    h: Vec<f64>,
    q: usize,
    n_groups: usize,
    contrasts: Vec<Vec<f64>>,
    group_sizes: Vec<usize>,
    mu: Vec<f64>,
    sd: Vec<f64>,
    degenerate: Vec<bool>,
    t_obs: Vec<f64>,
    sigma: DMatrix<f64>,
}

impl Prepared {
    fn new(d: &Dataset, k: &ContrastMatrix, y: &BinarizedMatrix) -> Result<Self> {
        if !d.comparisons_possible() {
            return invalid("at least two groups are required");
        }
        if k.n_groups() != d.n_groups() {
            return invalid("contrast matrix does not match the number of groups");
        }
        k.validate()?;
        let n = d.len();
        if y.n_subjects() != n || y.n_endpoints() == 0 {
            return invalid("endpoint matrix does not match the dataset");
        }
        let q = y.n_endpoints();
        let labels0 = d.group_labels();

        // Canonical order: by group, then endpoint values. Makes Monte Carlo
        // results independent of the input row order.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            labels0[a].cmp(&labels0[b]).then_with(|| {
                (0..q)
                    .map(|e| y.columns[e][a].total_cmp(&y.columns[e][b]))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        let labels: Vec<usize> = order.iter().map(|&i| labels0[i]).collect();
        let h: Vec<f64> = order
            .iter()
            .flat_map(|&i| (0..q).map(move |e| y.columns[e][i]))
            .collect();

        let gmat = DMatrix::from_fn(n, k.n_rows(), |i, c| k.coef[c][labels[i]]);
        let hmat = DMatrix::from_row_slice(n, q, &h);
        let (mu, sigma) = conditional_moments(&gmat, &hmat);
        let tmat = gmat.transpose() * &hmat;
        let t_obs: Vec<f64> = (0..k.n_rows() * q).map(|j| tmat[(j / q, j % q)]).collect();

        let diag: Vec<f64> = (0..sigma.nrows()).map(|j| sigma[(j, j)]).collect();
        let max_diag = diag.iter().cloned().fold(0.0, f64::max);
        let degenerate: Vec<bool> = diag
            .iter()
            .map(|&v| max_diag <= 0.0 || v <= VAR_EPS * max_diag)
            .collect();
        let sd = diag.iter().map(|v| v.max(0.0).sqrt()).collect();

        Ok(Self {
            labels,
            h,
            q,
            n_groups: d.n_groups(),
            contrasts: k.coef.clone(),
            group_sizes: d.group_sizes(),
            mu: mu.iter().copied().collect(),
            sd,
            degenerate,
            t_obs,
            sigma,
        })
    }

    fn linear_statistic(&self) -> LinearStatistic {
        LinearStatistic {
            t: DVector::from_vec(self.t_obs.clone()),
            mu: DVector::from_vec(self.mu.clone()),
            sigma: self.sigma.clone(),
            n_contrasts: self.contrasts.len(),
            n_endpoints: self.q,
            degenerate: self.degenerate.clone(),
        }
    }

    fn m(&self) -> usize {
        self.t_obs.len()
    }

    /// Oriented standardized statistics from per-group endpoint sums.
    fn stats_from_sums(&self, sums: &[f64], alt: Alternative, out: &mut [f64]) {
        let q = self.q;
        for (c, row) in self.contrasts.iter().enumerate() {
            for e in 0..q {
                let j = c * q + e;
                if self.degenerate[j] {
                    out[j] = f64::NAN;
                    continue;
                }
                let t: f64 = row.iter().enumerate().map(|(g, w)| w * sums[g * q + e]).sum();
                out[j] = alt.orient((t - self.mu[j]) / self.sd[j]);
            }
        }
    }

    fn group_sums(&self, labels: &[usize], sums: &mut [f64]) {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let q = self.q;
        for (i, &g) in labels.iter().enumerate() {
            for e in 0..q {
                sums[g * q + e] += self.h[i * q + e];
            }
        }
    }

    fn observed(&self, alt: Alternative) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_groups * self.q];
        self.group_sums(&self.labels, &mut sums);
        let mut z = vec![0.0; self.m()];
        self.stats_from_sums(&sums, alt, &mut z);
        z
    }
}

fn max_finite(z: &[f64]) -> f64 {
    z.iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max)
}

#[inline]
fn at_least(value: f64, observed: f64) -> bool {
    value >= observed - TIE_EPS * observed.abs().max(1.0)
}

/// Exceedance counts accumulated over the null distribution.
#[derive(Clone)]
struct Tally {
    adjusted: Vec<u64>,
    raw: Vec<u64>,
}

impl Tally {
    fn new(m: usize) -> Self {
        Self {
            adjusted: vec![0; m],
            raw: vec![0; m],
        }
    }

    fn add(&mut self, z_star: &[f64], z_obs: &[f64]) {
        let mx = max_finite(z_star);
        for j in 0..z_obs.len() {
            if z_obs[j].is_nan() {
                continue;
            }
            if at_least(mx, z_obs[j]) {
                self.adjusted[j] += 1;
            }
            if at_least(z_star[j], z_obs[j]) {
                self.raw[j] += 1;
            }
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.adjusted.iter_mut().zip(other.adjusted) {
            *a += b;
        }
        for (a, b) in self.raw.iter_mut().zip(other.raw) {
            *a += b;
        }
        self
    }
}

/// RNG for Monte Carlo replicate `r`: one ChaCha stream per replicate so that
/// results do not depend on how replicates are scheduled across threads.
pub(crate) fn replicate_rng(seed: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng
}

fn monte_carlo(prep: &Prepared, z_obs: &[f64], alt: Alternative, b: usize, seed: u64) -> Tally {
    let m = prep.m();
    let width = prep.n_groups * prep.q;
    (0..b as u64)
        .into_par_iter()
        .fold(
            || (Tally::new(m), prep.labels.clone(), vec![0.0; width], vec![0.0; m]),
            |(mut tally, mut labels, mut sums, mut z), r| {
                labels.copy_from_slice(&prep.labels);
                labels.shuffle(&mut replicate_rng(seed, r));
                prep.group_sums(&labels, &mut sums);
                prep.stats_from_sums(&sums, alt, &mut z);
                tally.add(&z, z_obs);
                (tally, labels, sums, z)
            },
        )
        .map(|(t, ..)| t)
        .reduce(|| Tally::new(m), Tally::merge)
}

/// Depth-first enumeration of all distinct label arrangements; calls `visit`
/// with per-group endpoint sums at every leaf.
fn enumerate<F: FnMut(&[f64])>(prep: &Prepared, mut visit: F) {
    fn rec<F: FnMut(&[f64])>(prep: &Prepared, i: usize, remaining: &mut [usize], sums: &mut [f64], visit: &mut F) {
        let n = prep.labels.len();
        if i == n {
            visit(sums);
            return;
        }
        let q = prep.q;
        for g in 0..remaining.len() {
            if remaining[g] == 0 {
                continue;
            }
            remaining[g] -= 1;
            for e in 0..q {
                sums[g * q + e] += prep.h[i * q + e];
            }
            rec(prep, i + 1, remaining, sums, visit);
            for e in 0..q {
                sums[g * q + e] -= prep.h[i * q + e];
            }
            remaining[g] += 1;
        }
    }
    let mut remaining = prep.group_sizes.clone();
    let mut sums = vec![0.0; prep.n_groups * prep.q];
    rec(prep, 0, &mut remaining, &mut sums, &mut visit);
}

fn check_exact(prep: &Prepared, threshold: u64) -> Result<u64> {
    match count_permutations(&prep.group_sizes) {
        PermCount::Finite(c) if c <= threshold as u128 => Ok(c as u64),
        c => Err(Error::TooManyPermutations {
            count: c.to_string(),
            threshold,
        }),
    }
}

fn exact(prep: &Prepared, z_obs: &[f64], alt: Alternative) -> (Tally, u64) {
    let m = prep.m();
    let mut tally = Tally::new(m);
    let mut z = vec![0.0; m];
    let mut total = 0u64;
    enumerate(prep, |sums| {
        prep.stats_from_sums(sums, alt, &mut z);
        tally.add(&z, z_obs);
        total += 1;
    });
    (tally, total)
}

/// Exact permutation distribution of the max statistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxDistribution {
    /// Distinct values of the max statistic, ascending.
    pub support: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub arrangements: u64,
    pub degenerate: Vec<bool>,
}

impl MaxDistribution {
    /// `P(max >= x)`.
    pub fn upper_tail(&self, x: f64) -> f64 {
        self.support
            .iter()
            .zip(&self.probabilities)
            .filter(|(v, _)| at_least(**v, x))
            .map(|(_, p)| p)
            .sum()
    }
}

/// Full null distribution of the max statistic by exhaustive enumeration.
pub fn exact_distribution(
    d: &Dataset,
    k: &ContrastMatrix,
    y: &BinarizedMatrix,
    alternative: Alternative,
    threshold: u64,
) -> Result<MaxDistribution> {
    let prep = Prepared::new(d, k, y)?;
    if prep.degenerate.iter().all(|&x| x) {
        return Err(Error::NoTestableEndpoint);
    }
    let total = check_exact(&prep, threshold)?;
    let mut values = Vec::with_capacity(total as usize);
    let mut z = vec![0.0; prep.m()];
    enumerate(&prep, |sums| {
        prep.stats_from_sums(sums, alternative, &mut z);
        values.push(max_finite(&z));
    });
    values.sort_by(f64::total_cmp);
    let mut support: Vec<f64> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    for v in values {
        match support.last() {
            Some(&last) if (v - last).abs() <= TIE_EPS * last.abs().max(1.0) => *counts.last_mut().unwrap() += 1,
            _ => {
                support.push(v);
                counts.push(1);
            }
        }
    }
    let probabilities = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(MaxDistribution {
        support,
        probabilities,
        arrangements: total,
        degenerate: prep.degenerate,
    })
}

/// The max(max) test: single-step adjusted p-values for every
/// (contrast, endpoint) component.
pub fn maxmax_test(
    d: &Dataset,
    k: &ContrastMatrix,
    y: &BinarizedMatrix,
    opts: &PermOptions,
) -> Result<PermutationResult> {
    let prep = Prepared::new(d, k, y)?;
    if prep.degenerate.iter().all(|&x| x) {
        return Err(Error::NoTestableEndpoint);
    }
    let alt = opts.alternative;
    let z_obs = prep.observed(alt);
    let m = prep.m();

    let use_exact = match opts.mode {
        PermMode::Exact => true,
        PermMode::MonteCarlo => false,
        PermMode::Auto => count_permutations(&prep.group_sizes).within(opts.exact_threshold),
    };
    let (tally, mode, replicates, pval): (Tally, PermMode, u64, Box<dyn Fn(u64) -> f64>) = if use_exact {
        check_exact(&prep, opts.exact_threshold)?;
        let (tally, total) = exact(&prep, &z_obs, alt);
        (
            tally,
            PermMode::Exact,
            total,
            Box::new(move |c| c as f64 / total as f64),
        )
    } else {
        if opts.replicates == 0 {
            return invalid("number of replicates must be positive");
        }
        let b = opts.replicates;
        let tally = monte_carlo(&prep, &z_obs, alt, b, opts.seed);
        (
            tally,
            PermMode::MonteCarlo,
            b as u64,
            Box::new(move |c| (c as f64 + 1.0) / (b as f64 + 1.0)),
        )
    };

    let mut warnings: Vec<String> = y.warnings.clone();
    let q = prep.q;
    let mut adjusted_p = vec![1.0; m];
    let mut raw_p = vec![1.0; m];
    for j in 0..m {
        if prep.degenerate[j] {
            warnings.push(format!(
                "component ({}, {}) has zero conditional variance; reported p = 1",
                k.labels[j / q],
                y.labels[j % q]
            ));
            continue;
        }
        adjusted_p[j] = pval(tally.adjusted[j]).min(1.0);
        raw_p[j] = pval(tally.raw[j]).min(1.0);
    }

    let sizes = d.group_sizes();
    let mut means = vec![0.0; d.n_groups() * q];
    prep.group_sums(&prep.labels, &mut means);
    for g in 0..d.n_groups() {
        for e in 0..q {
            means[g * q + e] /= sizes[g] as f64;
        }
    }
    let estimate = (0..m)
        .map(|j| {
            k.coef[j / q]
                .iter()
                .enumerate()
                .map(|(g, w)| w * means[g * q + j % q])
                .sum()
        })
        .collect();

    Ok(PermutationResult {
        contrast_labels: k.labels.clone(),
        endpoint_labels: y.labels.clone(),
        estimate,
        z: prep.observed(Alternative::Greater),
        raw_p,
        adjusted_p,
        degenerate: prep.degenerate.clone(),
        mode,
        replicates,
        seed: opts.seed,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrasts::default_names;
    use crate::data::{binarize, SubjectRecord};

    fn dataset(groups: &[&[i64]]) -> Dataset {
        let mut recs = Vec::new();
        for (g, vals) in groups.iter().enumerate() {
            for &v in *vals {
                recs.push(SubjectRecord {
                    group: g,
                    dose: None,
                    severity: v,
                });
            }
        }
        Dataset::new(default_names(groups.len()), vec![0, 1, 2], recs).unwrap()
    }

    #[test]
    fn permutation_counts() {
        assert_eq!(count_permutations(&[3, 3]), PermCount::Finite(20));
        assert_eq!(count_permutations(&[2, 2, 2]), PermCount::Finite(90));
        assert_eq!(count_permutations(&[1]), PermCount::Finite(1));
        let big = count_permutations(&[14, 12, 13, 14, 14]);
        assert!(!big.within(DEFAULT_EXACT_THRESHOLD));
        assert_eq!(big.to_string(), "too large");
        // 30! / (10!)^3
        assert_eq!(count_permutations(&[10, 10, 10]), PermCount::Finite(5_550_996_791_340));
    }

    #[test]
    fn two_by_two_moments_by_hand() {
        // g = Dunnett indicator on (c, c, t, t), h = (1, 1, 0, 0)
        let g = DMatrix::from_column_slice(4, 1, &[-1.0, -1.0, 1.0, 1.0]);
        let h = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 0.0, 0.0]);
        let (mu, sigma) = conditional_moments(&g, &h);
        assert!(mu[0].abs() < 1e-15);
        // T ranges over {-2 (1/6), 0 (4/6), 2 (1/6)}: variance 4/3.
        assert!((sigma[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        let t = (g.transpose() * &h)[(0, 0)];
        assert_eq!(t - mu[0], -2.0);
    }

    #[test]
    fn constant_endpoint_is_degenerate() {
        let d = dataset(&[&[1, 1, 1], &[1, 1, 1]]);
        let y = binarize(&d, Some(&[0])).unwrap();
        let k = ContrastMatrix::dunnett(&d.group_sizes(), &default_names(2)).unwrap();
        let ls = linear_statistic(&d, &k, &y).unwrap();
        assert!(ls.sigma.iter().all(|v| *v == 0.0));
        assert!(ls.degenerate[0]);
        let err = maxmax_test(&d, &k, &y, &PermOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoTestableEndpoint));
    }

    #[test]
    fn zero_statistic_when_t_equals_mu() {
        let d = dataset(&[&[0, 1], &[0, 1]]);
        let y = binarize(&d, Some(&[0])).unwrap();
        let k = ContrastMatrix::dunnett(&d.group_sizes(), &default_names(2)).unwrap();
        let ls = linear_statistic(&d, &k, &y).unwrap();
        assert_eq!(standardized_stats(&ls, Alternative::Greater), vec![0.0]);
    }

    #[test]
    fn least_extreme_arrangement_has_p_one() {
        let d = dataset(&[&[1, 1, 1], &[0, 0, 0], &[0, 0, 0]]);
        let y = binarize(&d, Some(&[0])).unwrap();
        let k = ContrastMatrix::dunnett(&d.group_sizes(), &default_names(3)).unwrap();
        let opts = PermOptions {
            mode: PermMode::Exact,
            ..Default::default()
        };
        let res = maxmax_test(&d, &k, &y, &opts).unwrap();
        assert_eq!(res.mode, PermMode::Exact);
        assert!(res.adjusted_p.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn exact_distribution_sums_to_one() {
        let d = dataset(&[&[0, 1, 2], &[1, 2, 2]]);
        let y = binarize(&d, Some(&[0, 1])).unwrap();
        let k = ContrastMatrix::dunnett(&d.group_sizes(), &default_names(2)).unwrap();
        let dist = exact_distribution(&d, &k, &y, Alternative::Greater, DEFAULT_EXACT_THRESHOLD).unwrap();
        assert_eq!(dist.arrangements, 20);
        assert!((dist.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let res = maxmax_test(
            &d,
            &k,
            &y,
            &PermOptions {
                mode: PermMode::Exact,
                ..Default::default()
            },
        )
        .unwrap();
        let z_max = res.z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p_min = res.adjusted_p.iter().cloned().fold(1.0, f64::min);
        assert!((dist.upper_tail(z_max) - p_min).abs() < 1e-12);
    }

    #[test]
    fn degenerate_component_excluded_from_max() {
        // endpoint EP1 constant (nobody above 1), EP0 informative
        let d = dataset(&[&[0, 0, 1], &[1, 1, 0]]);
        let y = binarize(&d, Some(&[0, 1])).unwrap();
        let k = ContrastMatrix::dunnett(&d.group_sizes(), &default_names(2)).unwrap();
        let res = maxmax_test(
            &d,
            &k,
            &y,
            &PermOptions {
                mode: PermMode::Exact,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(res.degenerate, vec![false, true]);
        assert_eq!(res.adjusted_p[1], 1.0);
        assert!(res.z[1].is_nan());
        assert!(res.warnings.iter().any(|w| w.contains("EP1")));
        // single informative component: adjusted equals raw
        assert_eq!(res.adjusted_p[0], res.raw_p[0]);
    }

    #[test]
    fn exact_threshold_enforced() {
        let d = dataset(&[&[0, 1, 2, 0, 1], &[1, 2, 2, 0, 1]]);
        let y = binarize(&d, None).unwrap();
        let k = ContrastMatrix::dunnett(&d.group_sizes(), &default_names(2)).unwrap();
        let opts = PermOptions {
            mode: PermMode::Exact,
            exact_threshold: 100,
            ..Default::default()
        };
        assert!(matches!(
            maxmax_test(&d, &k, &y, &opts),
            Err(Error::TooManyPermutations { .. })
        ));
        let auto = PermOptions {
            exact_threshold: 100,
            replicates: 500,
            ..Default::default()
        };
        assert_eq!(maxmax_test(&d, &k, &y, &auto).unwrap().mode, PermMode::MonteCarlo);
    }
}
