//! CSV ingestion and the group/label-balanced train/validation/test split.
//!
//! Categorical columns are one-hot encoded with categories in lexicographic
//! order; every other column must parse as a number. Features are then
//! standardized with statistics fitted on the training rows only.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

fn default_test_fraction() -> f64 {
    0.03
}

/// Per-dataset training defaults shipped with each spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingDefaults {
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    /// CSV location; relative paths resolve against the spec file's directory.
    pub path: PathBuf,
    pub label_column: String,
    pub favorable_label: String,
    pub sensitive_column: String,
    /// Split a numeric sensitive column into `<= t` / `> t` groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive_threshold: Option<f64>,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    #[serde(default)]
    pub drop_columns: Vec<String>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Rows per (group, label) test cell. Derived from `test_fraction` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_cell_count: Option<usize>,
    /// Rows per (group, label) validation cell.
    pub val_cell_count: usize,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingDefaults>,
}

impl DatasetSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: DatasetSpec = serde_json::from_str(&text)?;
        if spec.path.is_relative() {
            if let Some(dir) = path.parent() {
                spec.path = dir.join(&spec.path);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::input(format!(
                "test fraction {} not in (0, 1)",
                self.test_fraction
            )));
        }
        if self.val_cell_count == 0 {
            return Err(Error::input("validation cell count must be at least 1"));
        }
        Ok(())
    }
}

/// Encoded but unsplit, unstandardized data.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    pub features: Matrix,
    /// 1 for the favorable label, 0 otherwise.
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub group_names: Vec<String>,
}

enum ColumnKind {
    Numeric,
    Categorical(Vec<String>),
}

/// Reads the CSV named by `spec` and encodes it.
pub fn load_csv(spec: &DatasetSpec) -> Result<RawTable> {
    let file = std::fs::File::open(&spec.path).map_err(|e| Error::io(&spec.path, e))?;
    read_table(file, spec)
}

/// Same as [`load_csv`] over any reader.
pub fn read_table<R: std::io::Read>(reader: R, spec: &DatasetSpec) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::input(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::input(format!("missing column {name:?}")))
    };
    let label_col = col(&spec.label_column)?;
    let sens_col = col(&spec.sensitive_column)?;
    for c in spec.categorical_columns.iter().chain(&spec.drop_columns) {
        col(c)?;
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let rec = rec.map_err(|e| Error::input(format!("row {line}: {e}")))?;
        if rec.len() != headers.len() {
            return Err(Error::input(format!(
                "row {line}: {} fields, expected {}",
                rec.len(),
                headers.len()
            )));
        }
        let row: Vec<String> = rec.iter().map(|v| v.trim().to_string()).collect();
        if let Some(c) = row
            .iter()
            .position(|v| v.is_empty() || v.eq_ignore_ascii_case("na"))
        {
            return Err(Error::input(format!(
                "row {line}, column {:?}: missing value",
                headers[c]
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::input("CSV has no data rows"));
    }

    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_col && !spec.drop_columns.contains(&headers[c]))
        .collect();
    let mut kinds = Vec::with_capacity(feature_cols.len());
    let mut feature_names = Vec::new();
    for &c in &feature_cols {
        if spec.categorical_columns.contains(&headers[c]) {
            let cats: BTreeSet<&str> = rows.iter().map(|r| r[c].as_str()).collect();
            let cats: Vec<String> = cats.into_iter().map(str::to_string).collect();
            feature_names.extend(cats.iter().map(|v| format!("{}={}", headers[c], v)));
            kinds.push(ColumnKind::Categorical(cats));
        } else {
            feature_names.push(headers[c].clone());
            kinds.push(ColumnKind::Numeric);
        }
    }

    let width = feature_names.len();
    let mut features = Matrix::zeros(rows.len(), width);
    for (r, row) in rows.iter().enumerate() {
        let mut j = 0;
        for (&c, kind) in feature_cols.iter().zip(&kinds) {
            match kind {
                ColumnKind::Numeric => {
                    let v: f64 = row[c].parse().map_err(|_| {
                        Error::input(format!(
                            "row {}, column {:?}: cannot parse {:?} as a number",
                            r + 2,
                            headers[c],
                            row[c]
                        ))
                    })?;
                    features.set(r, j, v);
                    j += 1;
                }
                ColumnKind::Categorical(cats) => {
                    let pos = cats
                        .binary_search(&row[c])
                        .expect("category collected above");
                    features.set(r, j + pos, 1.0);
                    j += cats.len();
                }
            }
        }
    }

    let favorable = |v: &str| -> bool {
        match (v.parse::<f64>(), spec.favorable_label.parse::<f64>()) {
            (Ok(a), Ok(b)) => a == b,
            _ => v == spec.favorable_label,
        }
    };
    let labels = rows
        .iter()
        .map(|r| usize::from(favorable(&r[label_col])))
        .collect();

    let group_keys: Vec<String> = match spec.sensitive_threshold {
        Some(t) => rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let v: f64 = row[sens_col].parse().map_err(|_| {
                    Error::input(format!(
                        "row {}, column {:?}: sensitive value {:?} is not numeric",
                        r + 2,
                        spec.sensitive_column,
                        row[sens_col]
                    ))
                })?;
                Ok(if v > t {
                    format!(">{t}")
                } else {
                    format!("<={t}")
                })
            })
            .collect::<Result<_>>()?,
        None => rows.iter().map(|r| r[sens_col].clone()).collect(),
    };
    let group_names: Vec<String> = group_keys
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let groups = group_keys
        .iter()
        .map(|k| group_names.binary_search(k).expect("group collected above"))
        .collect();

    Ok(RawTable {
        feature_names,
        features,
        labels,
        groups,
        group_names,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub feature_names: Vec<String>,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub group_names: Vec<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl GroupedDataset {
    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    /// Row counts per `(group, label)` cell of a split, keyed by group name.
    pub fn cell_counts(&self, split: &[usize]) -> BTreeMap<(String, usize), usize> {
        let mut out = BTreeMap::new();
        for g in &self.group_names {
            for l in [0, 1] {
                out.insert((g.clone(), l), 0);
            }
        }
        for &i in split {
            *out.entry((self.group_names[self.groups[i]].clone(), self.labels[i]))
                .or_insert(0) += 1;
        }
        out
    }
}

/// Rows per `(group, label)` test cell: explicit, or `floor(fraction · N / (2 · groups))`
/// with a floor of one.
pub fn test_cell_count(spec: &DatasetSpec, rows: usize, groups: usize) -> usize {
    spec.test_cell_count.unwrap_or_else(|| {
        let cells = (2 * groups.max(1)) as f64;
        ((spec.test_fraction * rows as f64 / cells).floor() as usize).max(1)
    })
}

/// Seeded sampling without replacement: balanced test cells first, then the
/// balanced validation cells, the rest is training data. Cells too small to
/// fill are filled as far as possible and a warning is recorded.
pub fn balanced_split(table: &RawTable, spec: &DatasetSpec) -> Result<GroupedDataset> {
    spec.validate()?;
    let k = table.group_names.len();
    if k == 0 {
        return Err(Error::input("no sensitive groups"));
    }
    let test_n = test_cell_count(spec, table.labels.len(), k);
    let val_n = spec.val_cell_count;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.split_seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut warnings = Vec::new();
    for g in 0..k {
        let members = table.groups.iter().filter(|&&x| x == g).count();
        if members == 0 {
            return Err(Error::input(format!(
                "group {:?} is empty",
                table.group_names[g]
            )));
        }
        for label in [0, 1] {
            let mut cell: Vec<usize> = (0..table.labels.len())
                .filter(|&i| table.groups[i] == g && table.labels[i] == label)
                .collect();
            cell.shuffle(&mut rng);
            let t = test_n.min(cell.len());
            let v = val_n.min(cell.len() - t);
            if t < test_n || v < val_n {
                warnings.push(format!(
                    "cell ({}, label {label}) has {} rows; filled test {t}/{test_n}, validation {v}/{val_n}",
                    table.group_names[g],
                    cell.len()
                ));
            }
            test.extend_from_slice(&cell[..t]);
            val.extend_from_slice(&cell[t..t + v]);
            train.extend_from_slice(&cell[t + v..]);
        }
    }
    if train.is_empty() {
        warnings.push("training split is empty".to_string());
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(GroupedDataset {
        feature_names: table.feature_names.clone(),
        features: table.features.clone(),
        labels: table.labels.clone(),
        groups: table.groups.clone(),
        group_names: table.group_names.clone(),
        train,
        val,
        test,
        warnings,
        standardization: None,
    })
}

/// Fits a per-feature affine map on the training rows and applies it to every
/// row. Constant features map to zero. An empty training split leaves the
/// data untouched.
pub fn standardize(ds: &GroupedDataset) -> GroupedDataset {
    let mut out = ds.clone();
    if ds.train.is_empty() {
        return out;
    }
    let d = ds.features.cols();
    let n = ds.train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &ds.train {
        crate::linalg::axpy(1.0 / n, ds.features.row(i), &mut mean);
    }
    let mut var = vec![0.0; d];
    for &i in &ds.train {
        for (j, v) in ds.features.row(i).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2) / n;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    for r in 0..out.features.rows() {
        for (j, v) in out.features.row_mut(r).iter_mut().enumerate() {
            *v = if std[j] > 0.0 {
                (*v - mean[j]) / std[j]
            } else {
                0.0
            };
        }
    }
    out.standardization = Some(Standardization { mean, std });
    out
}

/// `load_csv`, `balanced_split` and `standardize` in sequence.
pub fn prepare(spec: &DatasetSpec) -> Result<GroupedDataset> {
    let table = load_csv(spec)?;
    Ok(standardize(&balanced_split(&table, spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(categorical: &[&str]) -> DatasetSpec {
        DatasetSpec {
            name: "t".into(),
            path: PathBuf::new(),
            label_column: "y".into(),
            favorable_label: "1".into(),
            sensitive_column: "s".into(),
            sensitive_threshold: None,
            categorical_columns: categorical.iter().map(|s| s.to_string()).collect(),
            drop_columns: vec![],
            test_fraction: 0.03,
            test_cell_count: None,
            val_cell_count: 1,
            split_seed: 7,
            training: None,
        }
    }

    #[test]
    fn one_hot_width() {
        let csv = "s,c,y\na,red,1\nb,blue,0\n";
        let t = read_table(csv.as_bytes(), &spec(&["s", "c"])).unwrap();
        assert_eq!(t.feature_names, vec!["s=a", "s=b", "c=blue", "c=red"]);
        assert_eq!(t.features.row(0), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.labels, vec![1, 0]);
    }

    #[test]
    fn missing_label_names_row() {
        let csv = "s,x,y\na,1.0,1\nb,2.0,\n";
        let err = read_table(csv.as_bytes(), &spec(&["s"]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 3") && err.contains("\"y\""), "{err}");
    }

    #[test]
    fn missing_column_and_bad_number() {
        let csv = "s,x\na,1\n";
        assert!(read_table(csv.as_bytes(), &spec(&[])).is_err());
        let csv = "s,x,y\na,abc,1\n";
        let err = read_table(csv.as_bytes(), &spec(&["s"]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("\"x\""), "{err}");
    }

    #[test]
    fn exhaustion_warns() {
        let csv = "s,x,y\na,1,1\na,2,0\nb,3,1\nb,4,0\n";
        let sp = spec(&["s"]);
        let t = read_table(csv.as_bytes(), &sp).unwrap();
        let ds = balanced_split(&t, &sp).unwrap();
        assert!(ds.train.is_empty());
        assert_eq!(ds.val.len() + ds.test.len(), 4);
        assert!(ds
            .warnings
            .iter()
            .any(|w| w.contains("training split is empty")));
    }

    #[test]
    fn standardize_two_points_and_constant() {
        let table = RawTable {
            feature_names: vec!["a".into(), "b".into()],
            features: Matrix::from_rows(&[vec![0.0, 5.0], vec![2.0, 5.0], vec![4.0, 9.0]]).unwrap(),
            labels: vec![0, 1, 0],
            groups: vec![0, 0, 0],
            group_names: vec!["g".into()],
        };
        let ds = GroupedDataset {
            feature_names: table.feature_names.clone(),
            features: table.features.clone(),
            labels: table.labels.clone(),
            groups: table.groups.clone(),
            group_names: table.group_names.clone(),
            train: vec![0, 1],
            val: vec![],
            test: vec![2],
            warnings: vec![],
            standardization: None,
        };
        let s = standardize(&ds);
        assert_eq!(s.features.row(0), &[-1.0, 0.0]);
        assert_eq!(s.features.row(1), &[1.0, 0.0]);
        // test row uses train statistics; constant train column maps to zero
        assert_eq!(s.features.row(2), &[3.0, 0.0]);

        let twice = standardize(&s);
        for (a, b) in twice.features.as_slice().iter().zip(s.features.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_groups() {
        let csv = "age,y\n20,1\n30,0\n25,1\n";
        let mut sp = spec(&[]);
        sp.sensitive_column = "age".into();
        sp.sensitive_threshold = Some(25.0);
        let t = read_table(csv.as_bytes(), &sp).unwrap();
        assert_eq!(t.group_names, vec!["<=25", ">25"]);
        assert_eq!(t.groups, vec![0, 1, 0]);
    }

    #[test]
    fn derived_test_cell_counts() {
        // test cell sizes implied by a 3% (10% for the small dataset) split
        let mut sp = spec(&[]);
        assert_eq!(test_cell_count(&sp, 48842, 2), 366);
        assert_eq!(test_cell_count(&sp, 48842, 5), 146);
        assert_eq!(test_cell_count(&sp, 45211, 2), 339);
        assert_eq!(test_cell_count(&sp, 30000, 2), 225);
        assert_eq!(test_cell_count(&sp, 1994, 2), 14);
        assert_eq!(test_cell_count(&sp, 1309, 2), 9);
        sp.test_fraction = 0.10;
        assert_eq!(test_cell_count(&sp, 649, 2), 16);
    }

    #[test]
    fn spec_validation() {
        let mut sp = spec(&[]);
        sp.test_fraction = 1.0;
        assert!(sp.validate().is_err());
        let mut sp = spec(&[]);
        sp.val_cell_count = 0;
        assert!(sp.validate().is_err());
    }
}
