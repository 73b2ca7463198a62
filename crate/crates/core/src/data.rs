//! Severity data in long (one row per subject) and count-table form, plus
//! cut-point binarization into correlated binary endpoints.

use std::collections::HashMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One animal: its group, optional dose and severity grade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    /// Index into [`Dataset::groups`].
    pub group: usize,
    pub dose: Option<f64>,
    pub severity: i64,
}

/// Per-subject severity data with an ordered group list; the first group is
/// the control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    groups: Vec<String>,
    grades: Vec<i64>,
    records: Vec<SubjectRecord>,
    warnings: Vec<String>,
}

/// Groups × grades count table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityTable {
    pub groups: Vec<String>,
    pub grades: Vec<i64>,
    pub counts: Vec<Vec<u64>>,
}

/// Column names used when reading long-format CSV.
#[derive(Debug, Clone)]
pub struct LongSchema {
    pub group: String,
    pub severity: String,
    pub dose: Option<String>,
    /// Explicit group order; first entry becomes the control.
    pub group_order: Option<Vec<String>>,
    /// Declared grade range `(min, max)`; defaults to the observed range.
    pub grade_range: Option<(i64, i64)>,
}

impl Default for LongSchema {
    fn default() -> Self {
        Self {
            group: "group".into(),
            severity: "severity".into(),
            dose: Some("dose".into()),
            group_order: None,
            grade_range: None,
        }
    }
}

/// Indicator endpoints `EP_c = [severity > c]`, stored column-wise in the
/// subject order of the originating [`Dataset`]. A raw-score column may be
/// appended, in which case `cutpoints` has one entry fewer than `columns`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizedMatrix {
    pub cutpoints: Vec<i64>,
    pub labels: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, checking every record against the group list and the
    /// declared grade levels.
    pub fn new(groups: Vec<String>, grades: Vec<i64>, records: Vec<SubjectRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::NoRecords);
        }
        if grades.len() < 2 || grades.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("grade levels must be strictly increasing with at least two levels");
        }
        let mut seen = vec![0usize; groups.len()];
        for (i, r) in records.iter().enumerate() {
            if r.group >= groups.len() {
                return invalid(format!("record {i} references unknown group index {}", r.group));
            }
            if grades.binary_search(&r.severity).is_err() {
                return invalid(format!(
                    "record {i}: severity {} outside declared grades {:?}",
                    r.severity, grades
                ));
            }
            if let Some(d) = r.dose {
                if !(d >= 0.0 && d.is_finite()) {
                    return invalid(format!("record {i}: dose must be a nonnegative number"));
                }
            }
            seen[r.group] += 1;
        }
        if let Some(g) = seen.iter().position(|&c| c == 0) {
            return Err(Error::EmptyGroup(groups[g].clone()));
        }
        let mut warnings = Vec::new();
        if groups.len() < 2 {
            warnings.push("no comparisons possible: only one group".to_string());
        }
        Ok(Self {
            groups,
            grades,
            records,
            warnings,
        })
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn grades(&self) -> &[i64] {
        &self.grades
    }

    pub fn grade_min(&self) -> i64 {
        self.grades[0]
    }

    pub fn grade_max(&self) -> i64 {
        *self.grades.last().unwrap()
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn comparisons_possible(&self) -> bool {
        self.groups.len() >= 2
    }

    pub fn group_labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.group).collect()
    }

    pub fn severities(&self) -> Vec<i64> {
        self.records.iter().map(|r| r.severity).collect()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.groups.len()];
        for r in &self.records {
            n[r.group] += 1;
        }
        n
    }

    /// Severities of one group, in record order.
    pub fn group_values(&self, g: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.group == g)
            .map(|r| r.severity as f64)
            .collect()
    }

    /// Per-group dose, if every record carries one and doses agree within groups.
    pub fn group_doses(&self) -> Result<Vec<f64>> {
        let mut doses: Vec<Option<f64>> = vec![None; self.groups.len()];
        for r in &self.records {
            let d = r
                .dose
                .ok_or_else(|| Error::Invalid("dose missing for some records".into()))?;
            match doses[r.group] {
                None => doses[r.group] = Some(d),
                Some(prev) if prev != d => {
                    return invalid(format!("group `{}` has inconsistent doses", self.groups[r.group]))
                }
                _ => {}
            }
        }
        Ok(doses.into_iter().map(|d| d.unwrap_or(f64::NAN)).collect())
    }

    /// Assigns one dose per group to every record.
    pub fn with_group_doses(mut self, doses: &[f64]) -> Result<Self> {
        if doses.len() != self.groups.len() {
            return invalid(format!("{} doses given for {} groups", doses.len(), self.groups.len()));
        }
        if doses.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return invalid("doses must be nonnegative numbers");
        }
        for r in &mut self.records {
            r.dose = Some(doses[r.group]);
        }
        Ok(self)
    }

    /// Moves the named group to the front so that it acts as the control.
    pub fn with_control(mut self, label: &str) -> Result<Self> {
        let idx = self
            .groups
            .iter()
            .position(|g| g == label)
            .ok_or_else(|| Error::Invalid(format!("unknown control group `{label}`")))?;
        if idx == 0 {
            return Ok(self);
        }
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.remove(idx);
        order.insert(0, idx);
        let mut remap = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        self.groups = order.iter().map(|&o| self.groups[o].clone()).collect();
        for r in &mut self.records {
            r.group = remap[r.group];
        }
        Ok(self)
    }

    /// Keeps only the listed groups (in the given order, first = control).
    pub fn select_groups(&self, labels: &[&str]) -> Result<Self> {
        let mut remap = vec![None; self.groups.len()];
        for (new, l) in labels.iter().enumerate() {
            let old = self
                .groups
                .iter()
                .position(|g| g == l)
                .ok_or_else(|| Error::Invalid(format!("unknown group `{l}`")))?;
            remap[old] = Some(new);
        }
        let records = self
            .records
            .iter()
            .filter_map(|r| remap[r.group].map(|g| SubjectRecord { group: g, ..r.clone() }))
            .collect();
        Dataset::new(
            labels.iter().map(|s| s.to_string()).collect(),
            self.grades.clone(),
            records,
        )
    }

    /// Counts per group and grade.
    pub fn collapse(&self) -> SeverityTable {
        let mut counts = vec![vec![0u64; self.grades.len()]; self.groups.len()];
        for r in &self.records {
            let j = self.grades.binary_search(&r.severity).expect("validated grade");
            counts[r.group][j] += 1;
        }
        SeverityTable {
            groups: self.groups.clone(),
            grades: self.grades.clone(),
            counts,
        }
    }

    /// Long CSV with columns `group,severity[,dose]`.
    pub fn to_long_csv(&self) -> String {
        let with_dose = self.records.iter().all(|r| r.dose.is_some());
        let mut out = String::from(if with_dose {
            "group,dose,severity\n"
        } else {
            "group,severity\n"
        });
        for r in &self.records {
            let g = &self.groups[r.group];
            match (with_dose, r.dose) {
                (true, Some(d)) => out.push_str(&format!("{g},{d},{}\n", r.severity)),
                _ => out.push_str(&format!("{g},{}\n", r.severity)),
            }
        }
        out
    }
}

impl SeverityTable {
    pub fn validate(&self) -> Result<()> {
        if self.grades.len() < 2 || self.grades.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("grade levels must be strictly increasing with at least two levels");
        }
        if self.counts.len() != self.groups.len() {
            return invalid("count rows do not match groups");
        }
        for (g, row) in self.groups.iter().zip(&self.counts) {
            if row.len() != self.grades.len() {
                return invalid(format!(
                    "row `{g}` has {} counts, expected {}",
                    row.len(),
                    self.grades.len()
                ));
            }
            if row.iter().sum::<u64>() == 0 {
                return Err(Error::EmptyGroup(g.clone()));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// One record per counted subject, grouped in table order.
    pub fn expand(&self) -> Result<Dataset> {
        self.validate()?;
        let mut records = Vec::with_capacity(self.total() as usize);
        for (g, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    records.push(SubjectRecord {
                        group: g,
                        dose: None,
                        severity: self.grades[j],
                    });
                }
            }
        }
        Dataset::new(self.groups.clone(), self.grades.clone(), records)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group");
        for g in &self.grades {
            out.push_str(&format!(",{g}"));
        }
        out.push('\n');
        for (label, row) in self.groups.iter().zip(&self.counts) {
            out.push_str(label);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Parse {
            row: 1,
            msg: format!("missing column `{name}`"),
        })
}

/// Reads long-format CSV. Rows are numbered as file lines (header = 1).
pub fn parse_long_csv<R: Read>(input: R, schema: &LongSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    let gi = column_index(&headers, &schema.group)?;
    let si = column_index(&headers, &schema.severity)?;
    let di = match &schema.dose {
        Some(name) => headers.iter().position(|h| h.trim() == name),
        None => None,
    };

    let mut groups: Vec<String> = schema.group_order.clone().unwrap_or_default();
    let fixed_order = schema.group_order.is_some();
    let mut index: HashMap<String, usize> = groups.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect();
    let mut records = Vec::new();

    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let label = field(gi);
        if label.is_empty() {
            return Err(Error::Parse {
                row,
                msg: "empty group".into(),
            });
        }
        let severity: i64 = field(si).parse().map_err(|_| Error::Parse {
            row,
            msg: format!("non-integer severity `{}`", field(si)),
        })?;
        if severity < 0 {
            return Err(Error::Parse {
                row,
                msg: "negative severity".into(),
            });
        }
        let dose = match di.map(field) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse::<f64>()
                    .ok()
                    .filter(|d| *d >= 0.0)
                    .ok_or_else(|| Error::Parse {
                        row,
                        msg: format!("invalid dose `{s}`"),
                    })?,
            ),
        };
        let group = match index.get(label) {
            Some(&g) => g,
            None if fixed_order => {
                return Err(Error::Parse {
                    row,
                    msg: format!("unknown group `{label}`"),
                })
            }
            None => {
                groups.push(label.to_string());
                index.insert(label.to_string(), groups.len() - 1);
                groups.len() - 1
            }
        };
        records.push(SubjectRecord { group, dose, severity });
    }
    if records.is_empty() {
        return Err(Error::NoRecords);
    }

    let (lo, hi) = match schema.grade_range {
        Some(r) => r,
        None => {
            let lo = records.iter().map(|r| r.severity).min().unwrap();
            let hi = records.iter().map(|r| r.severity).max().unwrap();
            if lo == hi {
                return invalid("all severities are equal; declare the grade range explicitly");
            }
            (lo, hi)
        }
    };
    if lo >= hi {
        return invalid("grade range must satisfy min < max");
    }
    if let Some((row, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| r.severity < lo || r.severity > hi)
    {
        return Err(Error::Parse {
            row: row + 2,
            msg: format!("severity {} outside grade range [{lo}, {hi}]", r.severity),
        });
    }
    Dataset::new(groups, (lo..=hi).collect(), records)
}

/// Reads a count table: first column group labels, remaining header cells
/// are integer grade values.
pub fn parse_table_csv<R: Read>(input: R) -> Result<SeverityTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            msg: "table needs a group column and grade columns".into(),
        });
    }
    let grades = headers
        .iter()
        .skip(1)
        .map(|h| {
            h.trim().parse::<i64>().map_err(|_| Error::Parse {
                row: 1,
                msg: format!("grade label `{h}` is not an integer"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut groups = Vec::new();
    let mut counts = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row,
                msg: format!("ragged row: {} fields, expected {}", rec.len(), headers.len()),
            });
        }
        groups.push(rec[0].trim().to_string());
        let row_counts = rec
            .iter()
            .skip(1)
            .map(|c| {
                let v: i64 = c.trim().parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("invalid count `{c}`"),
                })?;
                if v < 0 {
                    return Err(Error::Parse {
                        row,
                        msg: format!("negative count {v}"),
                    });
                }
                Ok(v as u64)
            })
            .collect::<Result<Vec<_>>>()?;
        counts.push(row_counts);
    }
    if groups.is_empty() {
        return Err(Error::NoRecords);
    }
    let table = SeverityTable { groups, grades, counts };
    table.validate()?;
    Ok(table)
}

/// Indicator columns `severity > c` for each cutpoint. `None` selects every
/// cutpoint in `[g_min, g_max - 1]`.
pub fn binarize(d: &Dataset, cutpoints: Option<&[i64]>) -> Result<BinarizedMatrix> {
    let cuts: Vec<i64> = match cutpoints {
        Some(c) => c.to_vec(),
        None => (d.grade_min()..d.grade_max()).collect(),
    };
    if cuts.is_empty() {
        return invalid("at least one cutpoint is required");
    }
    let mut labels = Vec::with_capacity(cuts.len());
    let mut columns = Vec::with_capacity(cuts.len());
    let mut warnings = Vec::new();
    for &c in &cuts {
        if c < d.grade_min() || c >= d.grade_max() {
            return invalid(format!(
                "cutpoint {c} outside [{}, {}]",
                d.grade_min(),
                d.grade_max() - 1
            ));
        }
        let col: Vec<f64> = d
            .records()
            .iter()
            .map(|r| f64::from(u8::from(r.severity > c)))
            .collect();
        let ones = col.iter().filter(|&&v| v > 0.0).count();
        let label = format!("EP{c}");
        if ones == 0 || ones == col.len() {
            warnings.push(format!(
                "endpoint {label} is constant (all {})",
                if ones == 0 { 0 } else { 1 }
            ));
        }
        labels.push(label);
        columns.push(col);
    }
    Ok(BinarizedMatrix {
        cutpoints: cuts,
        labels,
        columns,
        warnings,
    })
}

impl BinarizedMatrix {
    /// Appends the raw severity score as an extra endpoint column.
    pub fn with_raw_score(mut self, d: &Dataset, label: &str) -> Self {
        self.labels.push(label.to_string());
        self.columns
            .push(d.records().iter().map(|r| r.severity as f64).collect());
        self
    }

    pub fn relabel(mut self, labels: &[&str]) -> Result<Self> {
        if labels.len() != self.labels.len() {
            return invalid("label count does not match endpoint count");
        }
        self.labels = labels.iter().map(|s| s.to_string()).collect();
        Ok(self)
    }

    pub fn n_endpoints(&self) -> usize {
        self.columns.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    /// Row `i` as a vector over endpoints.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const GREEN: &str = "dose,1,2,3\n1,9,4,1\n2,4,8,0\n3,7,6,0\n4,3,10,1\n5,6,4,4\n";

    fn green_long() -> String {
        let t = parse_table_csv(GREEN.as_bytes()).unwrap();
        t.expand().unwrap().to_long_csv()
    }

    #[test]
    fn table_parse_and_expand() {
        let t = parse_table_csv(GREEN.as_bytes()).unwrap();
        assert_eq!(t.total(), 67);
        assert_eq!(t.counts.len(), 5);
        let d = t.expand().unwrap();
        assert_eq!(d.len(), 67);
        assert_eq!(d.group_sizes(), vec![14, 12, 13, 14, 14]);
        assert_eq!(d.collapse(), t);
    }

    #[test]
    fn long_parse_green() {
        let d = parse_long_csv(green_long().as_bytes(), &LongSchema::default()).unwrap();
        assert_eq!(d.group_sizes(), vec![14, 12, 13, 14, 14]);
        assert_eq!(d.groups()[0], "1");
        assert_eq!(d.grades(), &[1, 2, 3]);
    }

    #[test]
    fn header_only_is_no_records() {
        let err = parse_long_csv("group,severity\n".as_bytes(), &LongSchema::default()).unwrap_err();
        assert_eq!(err.to_string(), "no records");
    }

    #[test]
    fn single_group_flagged() {
        let d = parse_long_csv("group,severity\na,0\na,1\na,2\n".as_bytes(), &LongSchema::default()).unwrap();
        assert!(!d.comparisons_possible());
        assert!(d.warnings()[0].contains("no comparisons possible"));
    }

    #[test]
    fn long_parse_errors_name_the_row() {
        let err = parse_long_csv("group,severity\na,1\nb,x\n".as_bytes(), &LongSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }), "{err}");
        let err = parse_long_csv("grp,severity\na,1\n".as_bytes(), &LongSchema::default()).unwrap_err();
        assert!(err.to_string().contains("missing column `group`"));
        let schema = LongSchema {
            group_order: Some(vec!["a".into()]),
            ..Default::default()
        };
        let err = parse_long_csv("group,severity\na,1\nb,2\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }));
    }

    #[test]
    fn table_errors() {
        let err = parse_table_csv("g,1,2\na,1,2\nb,0,0\n".as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "empty group `b`");
        assert!(parse_table_csv("g,1,2\na,1,-2\n".as_bytes()).is_err());
        assert!(parse_table_csv("g,1,2\na,1\n".as_bytes()).is_err());
        let t = parse_table_csv("g,0,1\na,3,1\nb,2,2\n".as_bytes()).unwrap();
        assert_eq!(t.total(), 8);
    }

    #[test]
    fn one_by_one_table_expands_to_identical_records() {
        let t = SeverityTable {
            groups: vec!["a".into()],
            grades: vec![0, 1],
            counts: vec![vec![5, 0]],
        };
        let d = t.expand().unwrap();
        assert_eq!(d.len(), 5);
        assert!(d.records().iter().all(|r| r.severity == 0 && r.group == 0));
    }

    #[test]
    fn binarize_green() {
        let d = parse_table_csv(GREEN.as_bytes()).unwrap().expand().unwrap();
        let b = binarize(&d, Some(&[1, 2])).unwrap();
        let ctrl = |col: &Vec<f64>| -> f64 {
            col.iter()
                .zip(d.records())
                .filter(|(_, r)| r.group == 0)
                .map(|(v, _)| v)
                .sum()
        };
        assert_eq!(ctrl(&b.columns[0]), 5.0);
        assert_eq!(ctrl(&b.columns[1]), 1.0);
        assert!(b.warnings.is_empty());
        assert!(binarize(&d, Some(&[3])).is_err());
        assert!(binarize(&d, Some(&[0])).is_err());
        assert_eq!(binarize(&d, None).unwrap().cutpoints, vec![1, 2]);
    }

    #[test]
    fn constant_severity_warns() {
        let recs = (0..4)
            .map(|i| SubjectRecord {
                group: i % 2,
                dose: None,
                severity: 0,
            })
            .collect();
        let d = Dataset::new(vec!["c".into(), "t".into()], vec![0, 1, 2], recs).unwrap();
        let b = binarize(&d, None).unwrap();
        assert_eq!(b.warnings.len(), 2);
        assert!(b.columns.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn control_override() {
        let d = parse_table_csv(GREEN.as_bytes()).unwrap().expand().unwrap();
        let d2 = d.clone().with_control("3").unwrap();
        assert_eq!(d2.groups(), &["3", "1", "2", "4", "5"]);
        assert_eq!(d2.group_sizes(), vec![13, 14, 12, 14, 14]);
    }

    fn arb_table() -> impl Strategy<Value = SeverityTable> {
        (1usize..5, 2usize..5).prop_flat_map(|(g, k)| {
            proptest::collection::vec(proptest::collection::vec(0u64..6, k), g).prop_map(move |mut counts| {
                for row in &mut counts {
                    row[0] += 1;
                }
                SeverityTable {
                    groups: (0..g).map(|i| format!("g{i}")).collect(),
                    grades: (0..k as i64).collect(),
                    counts,
                }
            })
        })
    }

    proptest! {
        #[test]
        fn expand_collapse_round_trip(t in arb_table()) {
            prop_assert_eq!(t.expand().unwrap().collapse(), t.clone());
            let reparsed = parse_table_csv(t.to_csv().as_bytes()).unwrap();
            prop_assert_eq!(reparsed, t);
        }

        #[test]
        fn binarization_is_monotone_and_matches_counts(t in arb_table()) {
            let d = t.expand().unwrap();
            let b = binarize(&d, None).unwrap();
            for w in b.columns.windows(2) {
                prop_assert!(w[0].iter().zip(&w[1]).all(|(a, b)| a >= b));
            }
            for (ci, &c) in b.cutpoints.iter().enumerate() {
                for g in 0..t.groups.len() {
                    let from_table: u64 = t.grades.iter().zip(&t.counts[g]).filter(|(gr, _)| **gr > c).map(|(_, n)| n).sum();
                    let from_cols: f64 = b.columns[ci].iter().zip(d.records()).filter(|(_, r)| r.group == g).map(|(v, _)| v).sum();
                    prop_assert_eq!(from_table as f64, from_cols);
                }
            }
        }
    }
}
