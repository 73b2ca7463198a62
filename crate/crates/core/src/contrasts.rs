//! Contrast matrices for dose treated as a factor, and dose scalings for dose
//! treated as a quantitative covariate.

use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// Rows of group coefficients, one row per hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastMatrix {
    pub labels: Vec<String>,
    pub coef: Vec<Vec<f64>>,
    pub group_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastType {
    Dunnett,
    Williams,
}

/// Group names "1", "2", ... used when a design has no labels of its own.
pub fn default_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| i.to_string()).collect()
}

impl ContrastMatrix {
    /// Each dose group against the control (group 0).
    pub fn dunnett(group_sizes: &[usize], names: &[String]) -> Result<Self> {
        check_design(group_sizes, names)?;
        let k = group_sizes.len();
        let mut coef = Vec::with_capacity(k - 1);
        let mut labels = Vec::with_capacity(k - 1);
        for i in 1..k {
            let mut row = vec![0.0; k];
            row[0] = -1.0;
            row[i] = 1.0;
            coef.push(row);
            labels.push(format!("{} - {}", names[i], names[0]));
        }
        Ok(Self {
            labels,
            coef,
            group_sizes: group_sizes.to_vec(),
        })
    }

    /// Row `m` compares the size-weighted mean of the `m` highest dose groups
    /// with the control. Row 1 is the top dose alone, the last row pools all
    /// dose groups.
    pub fn williams(group_sizes: &[usize], names: &[String]) -> Result<Self> {
        check_design(group_sizes, names)?;
        let k = group_sizes.len();
        let mut coef = Vec::with_capacity(k - 1);
        let mut labels = Vec::with_capacity(k - 1);
        for m in 1..k {
            let top = k - m..k;
            let total: usize = group_sizes[top.clone()].iter().sum();
            let mut row = vec![0.0; k];
            row[0] = -1.0;
            for j in top {
                row[j] = group_sizes[j] as f64 / total as f64;
            }
            coef.push(row);
            labels.push(format!("C {m}"));
        }
        Ok(Self {
            labels,
            coef,
            group_sizes: group_sizes.to_vec(),
        })
    }

    pub fn of_type(kind: ContrastType, group_sizes: &[usize], names: &[String]) -> Result<Self> {
        match kind {
            ContrastType::Dunnett => Self::dunnett(group_sizes, names),
            ContrastType::Williams => Self::williams(group_sizes, names),
        }
    }

    /// Reads a user-supplied matrix: header `label,<group>,...`, one row per
    /// contrast. Coefficients may be written as fractions (`1/3`).
    pub fn from_csv<R: Read>(input: R, group_sizes: &[usize]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(input);
        let width = rdr.headers()?.len();
        if width != group_sizes.len() + 1 {
            return Err(Error::Parse {
                row: 1,
                msg: format!(
                    "expected {} group columns, found {}",
                    group_sizes.len(),
                    width.saturating_sub(1)
                ),
            });
        }
        let mut labels = Vec::new();
        let mut coef = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 2;
            let rec = rec?;
            if rec.len() != width {
                return Err(Error::Parse {
                    row,
                    msg: "ragged contrast row".into(),
                });
            }
            labels.push(rec[0].trim().to_string());
            let vals = rec
                .iter()
                .skip(1)
                .map(|s| {
                    parse_coef(s.trim()).ok_or_else(|| Error::Parse {
                        row,
                        msg: format!("bad coefficient `{s}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            coef.push(vals);
        }
        if coef.is_empty() {
            return Err(Error::NoRecords);
        }
        let m = Self {
            labels,
            coef,
            group_sizes: group_sizes.to_vec(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Every row must sum to zero and be nonzero.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.coef.len() {
            return invalid("contrast labels do not match rows");
        }
        for (label, row) in self.labels.iter().zip(&self.coef) {
            if row.len() != self.group_sizes.len() {
                return invalid(format!("contrast `{label}` has wrong number of groups"));
            }
            let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if scale == 0.0 {
                return invalid(format!("contrast `{label}` is all zero"));
            }
            if row.iter().sum::<f64>().abs() > ROW_SUM_TOL * scale.max(1.0) {
                return invalid(format!("contrast `{label}` does not sum to zero"));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.coef.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_rows(), self.n_groups(), |i, j| self.coef[i][j])
    }

    /// Multiplies row `i` by `factor`.
    pub fn scale_row(mut self, i: usize, factor: f64) -> Self {
        for v in &mut self.coef[i] {
            *v *= factor;
        }
        self
    }
}

fn check_design(group_sizes: &[usize], names: &[String]) -> Result<()> {
    if group_sizes.len() < 2 {
        return invalid("at least two groups are required for contrasts");
    }
    if names.len() != group_sizes.len() {
        return invalid("group names do not match group sizes");
    }
    Ok(())
}

fn parse_coef(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
            (b != 0.0).then(|| a / b)
        }
        None => s.parse().ok(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingKind {
    Arithmetic,
    Ordinal,
    ArithmeticLog,
}

impl ScalingKind {
    pub const ALL: [ScalingKind; 3] = [
        ScalingKind::Arithmetic,
        ScalingKind::Ordinal,
        ScalingKind::ArithmeticLog,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ScalingKind::Arithmetic => "ari",
            ScalingKind::Ordinal => "ord",
            ScalingKind::ArithmeticLog => "arilog",
        }
    }
}

/// Per-group dose scores under one scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseScaling {
    pub kind: ScalingKind,
    pub values: Vec<f64>,
}

/// Dose scores for each requested scaling. For the log scaling a zero dose is
/// mapped to `2 log d1 - log d2` (one log step below the smallest positive
/// dose) unless `zero_dose_substitute` supplies a positive dose to use instead.
pub fn dose_scalings(
    doses: &[f64],
    kinds: &[ScalingKind],
    zero_dose_substitute: Option<f64>,
) -> Result<Vec<DoseScaling>> {
    if doses.len() < 2 {
        return invalid("at least two doses are required");
    }
    if doses.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return invalid("doses must be nonnegative numbers");
    }
    if doses.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("doses must be strictly increasing");
    }
    kinds
        .iter()
        .map(|&kind| {
            let values = match kind {
                ScalingKind::Arithmetic => doses.to_vec(),
                ScalingKind::Ordinal => (0..doses.len()).map(|i| i as f64).collect(),
                ScalingKind::ArithmeticLog => log_scores(doses, zero_dose_substitute)?,
            };
            Ok(DoseScaling { kind, values })
        })
        .collect()
}

fn log_scores(doses: &[f64], zero_dose_substitute: Option<f64>) -> Result<Vec<f64>> {
    let positive: Vec<f64> = doses.iter().copied().filter(|d| *d > 0.0).collect();
    if positive.len() < 2 {
        return invalid("log dose scaling needs at least two positive doses");
    }
    let zero_score = match zero_dose_substitute {
        Some(s) if s > 0.0 && s < positive[0] => s.ln(),
        Some(s) => return invalid(format!("zero-dose substitute {s} must lie in (0, {}))", positive[0])),
        None => 2.0 * positive[0].ln() - positive[1].ln(),
    };
    Ok(doses
        .iter()
        .map(|&d| if d > 0.0 { d.ln() } else { zero_score })
        .collect())
}
