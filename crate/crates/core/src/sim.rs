//! Monte Carlo estimation of familywise error and power for small designs.
//!
//! Configuration is TOML:
//!
//! ```toml
//! seed = 2021
//! nsim = 2000
//! alpha = 0.05
//! sizes = [5, 5, 5, 5]
//! grades = [1, 2, 3]
//! # one row per group, or a single row shared by all groups
//! probs = [[0.5, 0.3, 0.2]]
//! method = "perm-maxmax"
//! contrast = "dunnett"        # or "williams"
//! alternative = "greater"
//! cutpoints = [1, 2]          # optional
//! include_raw_score = false
//! nperm = 999
//! exact = "auto"              # "on" | "off" | "auto"
//! doses = [0, 10, 50, 150]    # tukeytrend only
//! ```

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{run, AnalysisConfig, ContrastSpec, Method};
use crate::contrasts::default_names;
use crate::data::{Dataset, SubjectRecord};
use crate::error::{invalid, Error, Result};
use crate::perm::{parse_exact, replicate_rng};
use crate::Alternative;

fn default_alpha() -> f64 {
    0.05
}

fn default_nperm() -> usize {
    999
}

fn default_exact() -> String {
    "auto".into()
}

fn default_contrast() -> String {
    "dunnett".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub nsim: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub sizes: Vec<usize>,
    pub grades: Vec<i64>,
    pub probs: Vec<Vec<f64>>,
    pub method: Method,
    #[serde(default = "default_contrast")]
    pub contrast: String,
    #[serde(default)]
    pub alternative: Alternative,
    #[serde(default)]
    pub cutpoints: Option<Vec<i64>>,
    #[serde(default)]
    pub include_raw_score: bool,
    #[serde(default = "default_nperm")]
    pub nperm: usize,
    #[serde(default = "default_exact")]
    pub exact: String,
    #[serde(default)]
    pub doses: Option<Vec<f64>>,
}

impl SimConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(s).map_err(|e| Error::Invalid(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nsim == 0 {
            return invalid("nsim must be at least 1");
        }
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return invalid("need at least two groups, each with a positive size");
        }
        if self.grades.len() < 2 || self.grades.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("grades must be strictly increasing with at least two levels");
        }
        if self.probs.len() != 1 && self.probs.len() != self.sizes.len() {
            return invalid("probs needs one row, or one row per group");
        }
        for row in &self.probs {
            if row.len() != self.grades.len() {
                return invalid("each probs row needs one entry per grade");
            }
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return invalid("probs rows must be nonnegative and sum to 1");
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid("alpha must lie in (0, 1)");
        }
        self.analysis_config(0)?;
        Ok(())
    }

    fn group_probs(&self, g: usize) -> &[f64] {
        if self.probs.len() == 1 {
            &self.probs[0]
        } else {
            &self.probs[g]
        }
    }

    fn analysis_config(&self, seed: u64) -> Result<AnalysisConfig> {
        let contrast = match self.contrast.as_str() {
            "dunnett" => ContrastSpec::Dunnett,
            "williams" => ContrastSpec::Williams,
            other => return invalid(format!("unknown contrast `{other}`")),
        };
        if self.method.needs_doses() && self.doses.as_ref().is_none_or(|d| d.len() != self.sizes.len()) {
            return invalid(format!("method {} needs one dose per group", self.method));
        }
        Ok(AnalysisConfig {
            method: self.method,
            contrast,
            alternative: self.alternative,
            cutpoints: self.cutpoints.clone(),
            include_raw_score: self.include_raw_score,
            nperm: self.nperm,
            seed,
            exact: parse_exact(&self.exact)?,
            alpha: self.alpha,
            doses: self.doses.clone(),
            ..AnalysisConfig::default()
        })
    }
}

/// Severities drawn multinomially per group. Replicate `r` uses its own
/// random stream, so datasets do not depend on evaluation order.
pub fn simulate_dataset(cfg: &SimConfig, r: u64) -> Result<Dataset> {
    simulate_with_seed(cfg, r).map(|(d, _)| d)
}

fn simulate_with_seed(cfg: &SimConfig, r: u64) -> Result<(Dataset, u64)> {
    let mut rng = replicate_rng(cfg.seed, r);
    let mut records = Vec::with_capacity(cfg.sizes.iter().sum());
    for (g, &n) in cfg.sizes.iter().enumerate() {
        let p = cfg.group_probs(g);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut j = p.len() - 1;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    j = i;
                    break;
                }
            }
            // guard against rows that end in zeros after rounding
            while p[j] == 0.0 && j > 0 {
                j -= 1;
            }
            records.push(SubjectRecord {
                group: g,
                dose: None,
                severity: cfg.grades[j],
            });
        }
    }
    let analysis_seed = rng.next_u64();
    Ok((
        Dataset::new(default_names(cfg.sizes.len()), cfg.grades.clone(), records)?,
        analysis_seed,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub estimate: f64,
    /// `sqrt(p (1 - p) / n)`.
    pub se: f64,
}

impl Proportion {
    fn new(count: u64, n: u64) -> Self {
        let p = count as f64 / n as f64;
        Self {
            estimate: p,
            se: (p * (1.0 - p) / n as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRate {
    pub contrast: String,
    pub endpoint: Option<String>,
    pub rejection: Proportion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub config: SimConfig,
    /// Replicates where the method returned p-values (the denominator).
    pub n_success: u64,
    pub n_failed: u64,
    /// Successful replicates with at least one degenerate hypothesis.
    pub n_degenerate: u64,
    /// Proportion of successful replicates with any adjusted p <= alpha.
    pub familywise: Proportion,
    pub hypotheses: Vec<HypothesisRate>,
    /// Failure messages with their counts.
    pub failures: BTreeMap<String, u64>,
    pub failure_policy: String,
    pub software_version: String,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

enum Outcome {
    Done {
        rejected: Vec<bool>,
        labels: Vec<(String, Option<String>)>,
        degenerate: bool,
    },
    Failed(String),
}

fn replicate(cfg: &SimConfig, r: u64) -> Outcome {
    let run_one = || -> Result<Outcome> {
        let (d, seed) = simulate_with_seed(cfg, r)?;
        let rep = run(&d, &cfg.analysis_config(seed)?)?;
        Ok(Outcome::Done {
            rejected: rep.hypotheses.iter().map(|h| h.adjusted_p <= cfg.alpha).collect(),
            labels: rep
                .hypotheses
                .iter()
                .map(|h| (h.contrast.clone(), h.endpoint.clone()))
                .collect(),
            degenerate: rep.hypotheses.iter().any(|h| h.degenerate),
        })
    };
    run_one().unwrap_or_else(|e| Outcome::Failed(e.to_string()))
}

pub fn estimate_error_rates(cfg: &SimConfig) -> Result<SimReport> {
    estimate_error_rates_with_progress(cfg, |_| {})
}

/// As [`estimate_error_rates`], calling `progress` with the number of
/// finished replicates (in completion order).
pub fn estimate_error_rates_with_progress<F: Fn(usize) + Sync>(cfg: &SimConfig, progress: F) -> Result<SimReport> {
    cfg.validate()?;
    let done = AtomicUsize::new(0);
    let outcomes: Vec<Outcome> = (0..cfg.nsim as u64)
        .into_par_iter()
        .map(|r| {
            let o = replicate(cfg, r);
            progress(done.fetch_add(1, Ordering::Relaxed) + 1);
            o
        })
        .collect();

    let mut labels: Option<Vec<(String, Option<String>)>> = None;
    let mut per_hyp: Vec<u64> = Vec::new();
    let (mut n_success, mut any, mut n_degenerate) = (0u64, 0u64, 0u64);
    let mut failures = BTreeMap::new();
    for o in outcomes {
        match o {
            Outcome::Done {
                rejected,
                labels: l,
                degenerate,
            } => {
                if labels.is_none() {
                    per_hyp = vec![0; l.len()];
                    labels = Some(l);
                } else if labels.as_ref().is_some_and(|known| known.len() != rejected.len()) {
                    *failures
                        .entry("hypothesis set changed between replicates".to_string())
                        .or_insert(0) += 1;
                    continue;
                }
                n_success += 1;
                n_degenerate += u64::from(degenerate);
                any += u64::from(rejected.iter().any(|&x| x));
                for (c, &rj) in per_hyp.iter_mut().zip(&rejected) {
                    *c += u64::from(rj);
                }
            }
            Outcome::Failed(msg) => *failures.entry(msg).or_insert(0) += 1,
        }
    }
    let Some(labels) = labels else {
        let first = failures.keys().next().cloned().unwrap_or_default();
        return invalid(format!("every replicate failed (first error: {first})"));
    };
    let n_failed = failures.values().sum();
    Ok(SimReport {
        schema_version: crate::analysis::SCHEMA_VERSION,
        config: cfg.clone(),
        n_success,
        n_failed,
        n_degenerate,
        familywise: Proportion::new(any, n_success),
        hypotheses: labels
            .into_iter()
            .zip(per_hyp)
            .map(|((contrast, endpoint), c)| HypothesisRate {
                contrast,
                endpoint,
                rejection: Proportion::new(c, n_success),
            })
            .collect(),
        failures,
        failure_policy:
            "replicates where the method returns no p-values are counted as failures and excluded from the denominator"
                .to_string(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(nsim: usize) -> SimConfig {
        SimConfig::from_toml(&format!(
            "seed = 11\nnsim = {nsim}\nsizes = [5, 5, 5, 5]\ngrades = [1, 2, 3]\nprobs = [[0.5, 0.3, 0.2]]\n\
             method = \"perm-maxmax\"\nnperm = 199\n"
        ))
        .unwrap()
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let cfg = config(10);
        let d = simulate_dataset(&cfg, 3).unwrap();
        assert_eq!(d.group_sizes(), vec![5, 5, 5, 5]);
        assert_eq!(d.records(), simulate_dataset(&cfg, 3).unwrap().records());
        assert_ne!(d.records(), simulate_dataset(&cfg, 4).unwrap().records());
    }

    #[test]
    fn point_mass_control() {
        let mut cfg = config(1);
        cfg.probs = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.2, 0.3, 0.5],
            vec![0.2, 0.3, 0.5],
            vec![0.0, 0.0, 1.0],
        ];
        for r in 0..20 {
            let d = simulate_dataset(&cfg, r).unwrap();
            assert!(d.group_values(0).iter().all(|&v| v == 1.0));
            assert!(d.group_values(3).iter().all(|&v| v == 3.0));
        }
    }

    #[test]
    fn grade_frequencies_match_probabilities() {
        let mut cfg = config(1);
        cfg.sizes = vec![50, 50];
        let (mut counts, mut total) = ([0u64; 3], 0u64);
        for r in 0..1000 {
            for v in simulate_dataset(&cfg, r).unwrap().severities() {
                counts[(v - 1) as usize] += 1;
                total += 1;
            }
        }
        assert_eq!(total, 100_000);
        for (c, p) in counts.iter().zip([0.5, 0.3, 0.2]) {
            let se = (p * (1.0 - p) / total as f64).sqrt();
            assert!((*c as f64 / total as f64 - p).abs() < 3.0 * se, "{c} vs {p}");
        }
    }

    #[test]
    fn single_replicate_gives_zero_or_one() {
        let rep = estimate_error_rates(&config(1)).unwrap();
        assert!(rep.familywise.estimate == 0.0 || rep.familywise.estimate == 1.0);
        for h in &rep.hypotheses {
            assert!(h.rejection.estimate == 0.0 || h.rejection.estimate == 1.0);
        }
    }

    #[test]
    fn strong_alternative_has_high_power() {
        let mut cfg = config(40);
        cfg.sizes = vec![10, 10, 10];
        cfg.probs = vec![vec![1.0, 0.0, 0.0], vec![0.4, 0.3, 0.3], vec![0.0, 0.0, 1.0]];
        cfg.exact = "off".into();
        let rep = estimate_error_rates(&cfg).unwrap();
        assert!(rep.familywise.estimate >= 0.9);
        assert_eq!(rep.hypotheses.len(), 4);
    }

    #[test]
    fn thread_count_does_not_change_report() {
        let cfg = config(30);
        let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        let a = pool(1).install(|| estimate_error_rates(&cfg)).unwrap();
        let b = pool(3).install(|| estimate_error_rates(&cfg)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn invalid_configs() {
        let base = "seed = 1\nsizes = [3, 3]\ngrades = [0, 1]\nprobs = [[0.5, 0.5]]\nmethod = \"perm-maxmax\"\n";
        assert!(SimConfig::from_toml(&format!("nsim = 0\n{base}")).is_err());
        assert!(SimConfig::from_toml(&format!("nsim = 5\n{base}")).is_ok());
        assert!(SimConfig::from_toml(&format!("nsim = 5\nbogus = 1\n{base}")).is_err());
        let bad = base.replace("[[0.5, 0.5]]", "[[0.5, 0.6]]");
        assert!(SimConfig::from_toml(&format!("nsim = 5\n{bad}")).is_err());
        let trend = base.replace("perm-maxmax", "tukeytrend");
        assert!(SimConfig::from_toml(&format!("nsim = 5\n{trend}")).is_err());
    }

    #[test]
    fn all_constant_replicates_are_failures() {
        let cfg = SimConfig::from_toml(
            "seed = 1\nnsim = 3\nsizes = [3, 3]\ngrades = [0, 1]\nprobs = [[1.0, 0.0]]\nmethod = \"perm-maxmax\"\n",
        )
        .unwrap();
        assert!(estimate_error_rates(&cfg).is_err());
    }
}
