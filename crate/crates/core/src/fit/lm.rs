use nalgebra::{DMatrix, DVector};

use super::FitResult;
use crate::error::{invalid, Error, Result};
use crate::mvn::Df;

/// Freeman-Tukey transform `sqrt(y) + sqrt(y + 1)`.
pub fn freeman_tukey(y: i64) -> Result<f64> {
    if y < 0 {
        return invalid(format!("Freeman-Tukey transform needs y >= 0, got {y}"));
    }
    let y = y as f64;
    Ok(y.sqrt() + (y + 1.0).sqrt())
}

/// Ordinary least squares; `cov = s^2 (X'X)^-1` with `n - p` residual df.
pub fn fit_lm(x: &DMatrix<f64>, y: &[f64], coef_names: Vec<String>) -> Result<FitResult> {
    let (n, p) = x.shape();
    if y.len() != n {
        return invalid("response length does not match design rows");
    }
    if n <= p {
        return invalid("need more observations than coefficients");
    }
    let svd = x.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return Err(Error::RankDeficient);
    }
    let xtx = x.transpose() * x;
    let xtx_inv = super::sym_inverse(&xtx).ok_or(Error::RankDeficient)?;
    let yv = DVector::from_column_slice(y);
    let beta = &xtx_inv * (x.transpose() * &yv);
    let resid = &yv - x * &beta;
    let df = (n - p) as f64;
    let s2 = resid.norm_squared() / df;
    let mut warnings = Vec::new();
    let scale = yv.amax().max(1.0);
    if s2 <= 1e-24 * scale * scale {
        warnings.push("zero residual variance".to_string());
    }
    Ok(FitResult {
        coef_names,
        coef: beta.iter().copied().collect(),
        cov: xtx_inv * s2,
        df_residual: Df::Finite(df),
        dispersion: s2,
        converged: true,
        iterations: 0,
        loglik: None,
        separated: vec![false; p],
        warnings,
        blocks: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::test_data::green;
    use crate::fit::treatment_design;

    #[test]
    fn transform_values() {
        assert_eq!(freeman_tukey(0).unwrap(), 1.0);
        assert!((freeman_tukey(1).unwrap() - (1.0 + 2f64.sqrt())).abs() < 1e-15);
        assert!(freeman_tukey(-1).is_err());
    }

    #[test]
    fn green_group_means() {
        let d = green();
        let ft = |g: usize| {
            let v: Vec<f64> = d
                .group_values(g)
                .iter()
                .map(|&s| freeman_tukey(s as i64).unwrap())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((ft(0) - 2.71750).abs() < 1e-5);
        assert!((ft(1) - 2.90225).abs() < 1e-5);
    }

    #[test]
    fn green_ft_fit() {
        let d = green();
        let y: Vec<f64> = d.severities().iter().map(|&s| freeman_tukey(s).unwrap()).collect();
        let fit = fit_lm(&treatment_design(&d), &y, (0..5).map(|i| format!("b{i}")).collect()).unwrap();
        let se = fit.se();
        assert!((fit.coef[1] - 0.18475).abs() < 1e-5);
        assert!((se[1] - 0.17167).abs() < 1e-5);
        assert_eq!(fit.df_residual, Df::Finite(62.0));
    }

    #[test]
    fn constant_response_and_rank_deficiency() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { (i % 2) as f64 });
        let fit = fit_lm(&x, &[2.0; 6], vec!["a".into(), "b".into()]).unwrap();
        assert!(fit.coef[1].abs() < 1e-12);
        assert!(fit.warnings.iter().any(|w| w.contains("zero residual variance")));
        let dup = DMatrix::from_fn(6, 2, |_, _| 1.0);
        assert!(matches!(
            fit_lm(&dup, &[1.0; 6], vec!["a".into(), "b".into()]),
            Err(Error::RankDeficient)
        ));
    }

    #[test]
    fn two_group_mean_difference() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { f64::from(u8::from(i >= 3)) });
        let y = [1.0, 2.0, 3.0, 5.0, 5.0, 8.0];
        let fit = fit_lm(&x, &y, vec!["a".into(), "b".into()]).unwrap();
        assert!((fit.coef[1] - (6.0 - 2.0)).abs() < 1e-12);
    }
}
