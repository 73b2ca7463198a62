//! Independent resampling oracles for the analytic covariance formulas and
//! the multivariate normal and t integrator.

use nalgebra::DMatrix;
use ordtox::contrasts::{dose_scalings, ScalingKind};
use ordtox::data::{binarize, parse_table_csv, Dataset, SubjectRecord};
use ordtox::mvn::{mv_rectangle_prob, Df, MvnOptions};
use ordtox::releff::many_to_one;
use ordtox::trend::tukey_trend_fit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

const GREEN: &str = "dose,1,2,3\n1,9,4,1\n2,4,8,0\n3,7,6,0\n4,3,10,1\n5,6,4,4\n";

fn green() -> Dataset {
    parse_table_csv(GREEN.as_bytes()).unwrap().expand().unwrap()
}

/// Random correlation matrix from a random factor loading.
fn random_correlation(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = &a * a.transpose();
    DMatrix::from_fn(m, m, |i, j| s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt())
}

/// Plain Monte Carlo rectangle probability with its standard error.
fn brute_force(r: &DMatrix<f64>, lo: &[f64], hi: &[f64], df: Option<f64>, draws: usize, seed: u64) -> (f64, f64) {
    let m = r.nrows();
    let l = r.clone().cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chi = df.map(|v| ChiSquared::new(v).unwrap());
    let mut z = nalgebra::DVector::zeros(m);
    let mut hits = 0u64;
    for _ in 0..draws {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let scale = match (&chi, df) {
            (Some(c), Some(v)) => (c.sample(&mut rng) / v).sqrt(),
            _ => 1.0,
        };
        let x = &l * &z;
        if (0..m).all(|i| x[i] / scale >= lo[i] && x[i] / scale <= hi[i]) {
            hits += 1;
        }
    }
    let p = hits as f64 / draws as f64;
    (p, (p * (1.0 - p) / draws as f64).sqrt())
}

#[test]
fn integrator_matches_brute_force_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (case, df) in [None, Some(8.0)].into_iter().enumerate() {
        let r = random_correlation(&mut rng, 3);
        let lo = [f64::NEG_INFINITY, -1.0, -0.5];
        let hi = [1.2, f64::INFINITY, 1.5];
        let mvn_df = df.map_or(Df::Asymptotic, Df::Finite);
        let p = mv_rectangle_prob(&r, &lo, &hi, mvn_df, &MvnOptions::default()).unwrap();
        let (mc, se) = brute_force(&r, &lo, &hi, df, 10_000_000, 100 + case as u64);
        // the integrator error is reported as 3 standard errors
        let combined = (se * se + (p.error / 3.0).powi(2)).sqrt();
        assert!(
            (p.value - mc).abs() <= 3.0 * combined,
            "df {df:?}: {} vs {mc} (se {combined})",
            p.value
        );
    }
}

fn resample_within_groups(d: &Dataset, rng: &mut ChaCha8Rng) -> Dataset {
    let mut records = Vec::with_capacity(d.len());
    for g in 0..d.n_groups() {
        let members: Vec<&SubjectRecord> = d.records().iter().filter(|r| r.group == g).collect();
        for _ in 0..members.len() {
            records.push(members[rng.random_range(0..members.len())].clone());
        }
    }
    Dataset::new(d.groups().to_vec(), d.grades().to_vec(), records).unwrap()
}

fn covariance(samples: &[Vec<f64>], a: usize, b: usize) -> f64 {
    let n = samples.len() as f64;
    let (ma, mb) = (
        samples.iter().map(|s| s[a]).sum::<f64>() / n,
        samples.iter().map(|s| s[b]).sum::<f64>() / n,
    );
    samples.iter().map(|s| (s[a] - ma) * (s[b] - mb)).sum::<f64>() / (n - 1.0)
}

#[test]
fn relative_effect_variance_matches_bootstrap() {
    let d = green();
    let formula = many_to_one(&d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<Vec<f64>> = (0..100_000)
        .map(|_| many_to_one(&resample_within_groups(&d, &mut rng)).unwrap().estimate)
        .collect();
    for i in 0..4 {
        let boot = covariance(&samples, i, i);
        let ratio = formula.cov[(i, i)] / boot;
        assert!(
            (ratio - 1.0).abs() < 0.10,
            "comparison {i}: formula {} vs bootstrap {boot}",
            formula.cov[(i, i)]
        );
    }
    // shared-control covariance, relative to the variance scale
    for i in 0..4 {
        for j in (i + 1)..4 {
            let boot = covariance(&samples, i, j);
            let scale = (formula.cov[(i, i)] * formula.cov[(j, j)]).sqrt();
            assert!(
                (formula.cov[(i, j)] - boot).abs() < 0.10 * scale,
                "({i}, {j}): {} vs {boot}",
                formula.cov[(i, j)]
            );
        }
    }
}

#[test]
fn trend_correlation_matches_bootstrap() {
    let d = green();
    let y = binarize(&d, Some(&[1, 2])).unwrap();
    let scalings = dose_scalings(
        &[0.0, 1.0, 2.0, 3.0, 4.0],
        &[
            ScalingKind::Arithmetic,
            ScalingKind::Ordinal,
            ScalingKind::ArithmeticLog,
        ],
        None,
    )
    .unwrap();
    let stack = tukey_trend_fit(&d, &y, &scalings, None).unwrap();
    assert!(stack.cells.iter().all(|c| !c.excluded));
    let m = stack.cells.len();
    let corr = |a: usize, b: usize| stack.cov[(a, b)] / (stack.cov[(a, a)] * stack.cov[(b, b)]).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut samples = Vec::new();
    while samples.len() < 10_000 {
        let b = resample_within_groups(&d, &mut rng);
        let Ok(yb) = binarize(&b, Some(&[1, 2])) else { continue };
        match tukey_trend_fit(&b, &yb, &scalings, None) {
            Ok(st) if st.cells.iter().all(|c| !c.excluded) => {
                samples.push(st.cells.iter().map(|c| c.slope).collect::<Vec<_>>())
            }
            _ => continue,
        }
    }
    for a in 0..m {
        for b in (a + 1)..m {
            let boot = covariance(&samples, a, b) / (covariance(&samples, a, a) * covariance(&samples, b, b)).sqrt();
            assert!(
                (corr(a, b) - boot).abs() < 0.05,
                "{} vs {}: sandwich {} bootstrap {boot}",
                stack.cells[a].label,
                stack.cells[b].label,
                corr(a, b)
            );
        }
    }
}
