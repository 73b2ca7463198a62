//! Method pipelines from a [`Dataset`] to a serializable [`TestReport`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrasts::{dose_scalings, ContrastMatrix, ContrastType, ScalingKind};
use crate::data::{binarize, BinarizedMatrix, Dataset};
use crate::error::{invalid, Error, Result};
use crate::fit::{
    fit_glm, fit_lm, fit_multinomial, fit_prop_odds, freeman_tukey, treatment_design, treatment_layout, Family,
    FitResult, GlmOptions, MultinomialOptions,
};
use crate::mvn::{Df, MvnOptions};
use crate::perm::{maxmax_test, PermMode, PermOptions, DEFAULT_EXACT_THRESHOLD, DEFAULT_REPLICATES};
use crate::releff::releff_many_to_one;
use crate::simult::{max_t_adjust, SimOptions, SimTestResult};
use crate::trend::{tukey_trend_fit, tukey_trend_test};
use crate::Alternative;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PermMaxmax,
    FtDunnett,
    GlmDunnett,
    PropoddsDunnett,
    MultinomialDunnett,
    Releff,
    Tukeytrend,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::PermMaxmax,
        Method::FtDunnett,
        Method::GlmDunnett,
        Method::PropoddsDunnett,
        Method::MultinomialDunnett,
        Method::Releff,
        Method::Tukeytrend,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PermMaxmax => "perm-maxmax",
            Method::FtDunnett => "ft-dunnett",
            Method::GlmDunnett => "glm-dunnett",
            Method::PropoddsDunnett => "propodds-dunnett",
            Method::MultinomialDunnett => "multinomial-dunnett",
            Method::Releff => "releff",
            Method::Tukeytrend => "tukeytrend",
        }
    }

    pub fn needs_doses(self) -> bool {
        self == Method::Tukeytrend
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method `{s}`")))
    }
}

/// Contrast choice for the factor-based methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastSpec {
    Dunnett,
    Williams,
    Custom(ContrastMatrix),
}

impl ContrastSpec {
    pub fn build(&self, d: &Dataset) -> Result<ContrastMatrix> {
        let sizes = d.group_sizes();
        let k = match self {
            ContrastSpec::Dunnett => ContrastMatrix::of_type(ContrastType::Dunnett, &sizes, d.groups())?,
            ContrastSpec::Williams => ContrastMatrix::of_type(ContrastType::Williams, &sizes, d.groups())?,
            ContrastSpec::Custom(k) => {
                if k.n_groups() != d.n_groups() {
                    return invalid(format!(
                        "custom contrasts have {} columns for {} groups",
                        k.n_groups(),
                        d.n_groups()
                    ));
                }
                k.clone()
            }
        };
        k.validate()?;
        Ok(k)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContrastSpec::Dunnett => "dunnett",
            ContrastSpec::Williams => "williams",
            ContrastSpec::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub method: Method,
    pub contrast: ContrastSpec,
    pub alternative: Alternative,
    pub cutpoints: Option<Vec<i64>>,
    pub include_raw_score: bool,
    pub nperm: usize,
    pub seed: u64,
    pub exact: PermMode,
    pub exact_threshold: u64,
    /// Simultaneous intervals are at level `1 - alpha`.
    pub alpha: f64,
    /// Per-group doses; overrides any dose column in the data.
    pub doses: Option<Vec<f64>>,
    pub zero_dose_substitute: Option<f64>,
    pub mvn_tol: f64,
    pub multinomial_overall_dispersion: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            method: Method::PermMaxmax,
            contrast: ContrastSpec::Dunnett,
            alternative: Alternative::Greater,
            cutpoints: None,
            include_raw_score: false,
            nperm: DEFAULT_REPLICATES,
            seed: 0,
            exact: PermMode::Auto,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            alpha: 0.05,
            doses: None,
            zero_dose_substitute: None,
            mvn_tol: MvnOptions::default().tol,
            multinomial_overall_dispersion: false,
        }
    }
}

impl AnalysisConfig {
    fn sim_options(&self) -> SimOptions {
        SimOptions {
            alternative: self.alternative,
            level: 1.0 - self.alpha,
            mvn: MvnOptions {
                tol: self.mvn_tol,
                seed: self.seed,
                ..MvnOptions::default()
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid("alpha must lie in (0, 1)");
        }
        if !(self.mvn_tol > 0.0) {
            return invalid("integration tolerance must be positive");
        }
        if self.method.needs_doses() && self.doses.is_none() {
            return invalid(format!("method {} needs doses", self.method));
        }
        Ok(())
    }
}

/// One tested hypothesis. Missing values are `None` (e.g. the permutation
/// test has no standard error; one-sided intervals have one infinite bound).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub contrast: String,
    pub endpoint: Option<String>,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub statistic: Option<f64>,
    pub raw_p: Option<f64>,
    pub adjusted_p: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub alternative: Alternative,
    pub contrast: String,
    pub alpha: f64,
    pub n_subjects: usize,
    pub groups: Vec<String>,
    pub group_sizes: Vec<usize>,
    /// Permutation replicates (Monte Carlo) or arrangements (exact).
    pub replicates: Option<u64>,
    pub mode: Option<PermMode>,
    /// Reference distribution of the statistics: `"asymptotic"` or a df.
    pub df: Option<Df>,
    pub mvn_tolerance: Option<f64>,
    pub integration_error: Option<f64>,
    pub critical_value: Option<f64>,
    pub cutpoints: Option<Vec<i64>>,
    pub doses: Option<Vec<f64>>,
    pub warnings: Vec<String>,
    pub software_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub schema_version: u32,
    pub method: Method,
    pub hypotheses: Vec<Hypothesis>,
    pub metadata: Metadata,
}

impl TestReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Invalid(format!("invalid report: {e}")))
    }

    /// One row per hypothesis; empty cells for missing values.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            "contrast",
            "endpoint",
            "estimate",
            "se",
            "statistic",
            "raw_p",
            "adjusted_p",
            "lower",
            "upper",
            "degenerate",
        ])
        .expect("in-memory write");
        for h in &self.hypotheses {
            w.write_record([
                h.contrast.clone(),
                h.endpoint.clone().unwrap_or_default(),
                opt(h.estimate),
                opt(h.se),
                opt(h.statistic),
                opt(h.raw_p),
                h.adjusted_p.to_string(),
                opt(h.lower),
                opt(h.upper),
                h.degenerate.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn endpoints(d: &Dataset, cfg: &AnalysisConfig) -> Result<BinarizedMatrix> {
    let y = binarize(d, cfg.cutpoints.as_deref())?;
    Ok(if cfg.include_raw_score {
        y.with_raw_score(d, "score")
    } else {
        y
    })
}

fn base_metadata(d: &Dataset, cfg: &AnalysisConfig, contrast: &str) -> Metadata {
    Metadata {
        seed: cfg.seed,
        alternative: cfg.alternative,
        contrast: contrast.to_string(),
        alpha: cfg.alpha,
        n_subjects: d.len(),
        groups: d.groups().to_vec(),
        group_sizes: d.group_sizes(),
        replicates: None,
        mode: None,
        df: None,
        mvn_tolerance: None,
        integration_error: None,
        critical_value: None,
        cutpoints: None,
        doses: None,
        warnings: d.warnings().to_vec(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn sim_hypotheses(res: &SimTestResult, endpoint: Option<&str>) -> Vec<Hypothesis> {
    (0..res.len())
        .map(|i| Hypothesis {
            contrast: res.labels[i].clone(),
            endpoint: endpoint.map(str::to_string),
            estimate: finite(res.estimate[i]),
            se: finite(res.se[i]),
            statistic: res.statistic[i],
            raw_p: Some(res.raw_p[i]),
            adjusted_p: res.adjusted_p[i],
            lower: res.lower[i],
            upper: res.upper[i],
            degenerate: res.degenerate[i],
        })
        .collect()
}

fn add_sim_metadata(meta: &mut Metadata, res: &SimTestResult, tol: f64) {
    meta.df = Some(res.df);
    meta.mvn_tolerance = Some(tol);
    meta.integration_error = Some(res.error);
    meta.critical_value = Some(res.critical_value);
    meta.warnings.extend(res.warnings.iter().cloned());
}

fn treatment_fit(d: &Dataset, y: &[f64], family: Option<Family>) -> Result<FitResult> {
    let (names, block) = treatment_layout(d);
    let x = treatment_design(d);
    let mut fit = match family {
        None => fit_lm(&x, y, names)?,
        Some(f) => fit_glm(&x, y, f, names, &GlmOptions::default())?,
    };
    fit.blocks = vec![block];
    Ok(fit)
}

/// Runs the configured method on `d`.
pub fn run(d: &Dataset, cfg: &AnalysisConfig) -> Result<TestReport> {
    cfg.validate()?;
    if !d.comparisons_possible() {
        return invalid("no comparisons possible: only one group");
    }
    let d = match &cfg.doses {
        Some(doses) => d.clone().with_group_doses(doses)?,
        None => d.clone(),
    };
    let sim_opts = cfg.sim_options();
    let (hypotheses, meta) = match cfg.method {
        Method::PermMaxmax => {
            let k = cfg.contrast.build(&d)?;
            let y = endpoints(&d, cfg)?;
            let opts = PermOptions {
                alternative: cfg.alternative,
                replicates: cfg.nperm,
                seed: cfg.seed,
                mode: cfg.exact,
                exact_threshold: cfg.exact_threshold,
            };
            let res = maxmax_test(&d, &k, &y, &opts)?;
            let mut meta = base_metadata(&d, cfg, cfg.contrast.name());
            meta.replicates = Some(res.replicates);
            meta.mode = Some(res.mode);
            meta.cutpoints = Some(y.cutpoints.clone());
            meta.warnings.extend(res.warnings.iter().cloned());
            let q = res.endpoint_labels.len();
            let hyps = (0..res.z.len())
                .map(|j| Hypothesis {
                    contrast: res.contrast_labels[j / q].clone(),
                    endpoint: Some(res.endpoint_labels[j % q].clone()),
                    estimate: Some(res.estimate[j]),
                    se: None,
                    statistic: finite(res.z[j]),
                    raw_p: Some(res.raw_p[j]),
                    adjusted_p: res.adjusted_p[j],
                    lower: None,
                    upper: None,
                    degenerate: res.degenerate[j],
                })
                .collect();
            (hyps, meta)
        }
        Method::FtDunnett | Method::GlmDunnett | Method::PropoddsDunnett | Method::MultinomialDunnett => {
            let k = cfg.contrast.build(&d)?;
            let fit = match cfg.method {
                Method::FtDunnett => {
                    let y = d
                        .severities()
                        .iter()
                        .map(|&s| freeman_tukey(s))
                        .collect::<Result<Vec<_>>>()?;
                    treatment_fit(&d, &y, None)?
                }
                Method::GlmDunnett => {
                    if d.grade_min() < 0 {
                        return invalid("quasi-Poisson model needs nonnegative grades");
                    }
                    let y: Vec<f64> = d.severities().iter().map(|&s| s as f64).collect();
                    treatment_fit(&d, &y, Some(Family::QuasiPoissonLog))?
                }
                Method::PropoddsDunnett => fit_prop_odds(&d)?,
                _ => fit_multinomial(
                    &d,
                    &MultinomialOptions {
                        ref_level: None,
                        overall_dispersion: cfg.multinomial_overall_dispersion,
                    },
                )?,
            };
            let res = max_t_adjust(&fit, &k, &sim_opts)?;
            let mut meta = base_metadata(&d, cfg, cfg.contrast.name());
            add_sim_metadata(&mut meta, &res, cfg.mvn_tol);
            (sim_hypotheses(&res, None), meta)
        }
        Method::Releff => {
            let k = cfg.contrast.build(&d)?;
            let res = releff_many_to_one(&d, &k, &sim_opts)?;
            let mut meta = base_metadata(&d, cfg, cfg.contrast.name());
            meta.df = Some(Df::Finite(res.joint_df));
            meta.mvn_tolerance = Some(cfg.mvn_tol);
            meta.integration_error = Some(res.error);
            meta.critical_value = Some(res.critical_value);
            meta.warnings.extend(res.warnings.iter().cloned());
            let hyps = (0..res.labels.len())
                .map(|i| Hypothesis {
                    contrast: res.labels[i].clone(),
                    endpoint: None,
                    estimate: Some(res.estimate[i]),
                    se: Some(res.variance[i].sqrt()),
                    statistic: res.statistic[i],
                    raw_p: Some(res.raw_p[i]),
                    adjusted_p: res.adjusted_p[i],
                    lower: Some(res.lower[i]),
                    upper: Some(res.upper[i]),
                    degenerate: res.degenerate[i],
                })
                .collect();
            (hyps, meta)
        }
        Method::Tukeytrend => {
            let doses = d.group_doses()?;
            let y = endpoints(&d, cfg)?;
            let scalings = dose_scalings(&doses, &ScalingKind::ALL, cfg.zero_dose_substitute)?;
            let stack = tukey_trend_fit(&d, &y, &scalings, None)?;
            let res = tukey_trend_test(&stack, &sim_opts)?;
            let mut meta = base_metadata(&d, cfg, "tukey");
            meta.cutpoints = Some(y.cutpoints.clone());
            meta.doses = Some(doses);
            add_sim_metadata(&mut meta, &res, cfg.mvn_tol);
            meta.warnings.extend(y.warnings.iter().cloned());
            let mut hyps = sim_hypotheses(&res, None);
            for (h, c) in hyps.iter_mut().zip(&stack.cells) {
                h.contrast = format!("slope.{}", c.scaling.short_name());
                h.endpoint = Some(c.endpoint.clone());
            }
            (hyps, meta)
        }
    };
    let mut meta = meta;
    if let Some(doses) = &cfg.doses {
        meta.doses = Some(doses.clone());
    }
    dedup(&mut meta.warnings);
    Ok(TestReport {
        schema_version: SCHEMA_VERSION,
        method: cfg.method,
        hypotheses,
        metadata: meta,
    })
}

fn dedup(v: &mut Vec<String>) {
    let mut seen = std::collections::HashSet::new();
    v.retain(|w| seen.insert(w.clone()));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::test_data::green;

    fn cfg(method: Method) -> AnalysisConfig {
        AnalysisConfig {
            method,
            seed: 1,
            nperm: 2000,
            ..Default::default()
        }
    }

    #[test]
    fn every_method_runs_on_green() {
        let d = green();
        for m in Method::ALL {
            let mut c = cfg(m);
            if m.needs_doses() {
                c.doses = Some(vec![0.0, 10.0, 50.0, 150.0, 400.0]);
            }
            let rep = run(&d, &c).unwrap();
            assert!(!rep.hypotheses.is_empty(), "{m}");
            assert!(
                rep.hypotheses.iter().all(|h| h.adjusted_p > 0.0 && h.adjusted_p <= 1.0),
                "{m}"
            );
            let back = TestReport::from_json(&rep.to_json()).unwrap();
            assert_eq!(back, rep, "{m}");
        }
    }

    #[test]
    fn hypothesis_counts_and_labels() {
        let d = green();
        let rep = run(
            &d,
            &AnalysisConfig {
                cutpoints: Some(vec![1, 2]),
                ..cfg(Method::PermMaxmax)
            },
        )
        .unwrap();
        assert_eq!(rep.hypotheses.len(), 8);
        assert_eq!(rep.hypotheses[0].contrast, "2 - 1");
        assert_eq!(rep.hypotheses[1].endpoint.as_deref(), Some("EP2"));
        let rep = run(&d, &cfg(Method::MultinomialDunnett)).unwrap();
        assert_eq!(rep.hypotheses.len(), 8);
        assert_eq!(rep.hypotheses[4].contrast, "C3/C1: 2 - 1");
        assert!(rep.metadata.warnings.iter().any(|w| w.contains("separation suspected")));
        let ft = run(&d, &cfg(Method::FtDunnett)).unwrap();
        assert_eq!(ft.metadata.df, Some(Df::Finite(62.0)));
    }

    #[test]
    fn csv_output_has_one_row_per_hypothesis() {
        let rep = run(&green(), &cfg(Method::GlmDunnett)).unwrap();
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("2 - 1,,0.154"));
    }

    #[test]
    fn trend_requires_doses() {
        assert!(run(&green(), &cfg(Method::Tukeytrend)).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("anova".parse::<Method>().is_err());
    }
}
