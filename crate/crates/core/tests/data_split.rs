mod common;

use common::titanic_spec_path;
use nashmeta::data::{balanced_split, load_csv, prepare, read_table, test_cell_count, DatasetSpec};
use std::collections::BTreeSet;

fn titanic() -> DatasetSpec {
    DatasetSpec::from_json_file(titanic_spec_path()).unwrap()
}

#[test]
fn titanic_table_shape() {
    let t = load_csv(&titanic()).unwrap();
    assert_eq!(t.features.rows(), 1309);
    assert_eq!(
        t.group_names,
        vec!["female".to_string(), "male".to_string()]
    );
    let count = |g: usize, y: usize| {
        (0..1309)
            .filter(|&i| t.groups[i] == g && t.labels[i] == y)
            .count()
    };
    assert_eq!(
        [count(0, 0), count(0, 1), count(1, 0), count(1, 1)],
        [127, 339, 682, 161]
    );
}

#[test]
fn titanic_cells_are_balanced_and_disjoint() {
    let spec = titanic();
    let ds = prepare(&spec).unwrap();
    assert_eq!(test_cell_count(&spec, 1309, 2), 9);
    for ((_, _), n) in ds.cell_counts(&ds.test) {
        assert_eq!(n, 9);
    }
    for ((_, _), n) in ds.cell_counts(&ds.val) {
        assert_eq!(n, 1);
    }
    assert_eq!(ds.test.len(), 36);
    assert_eq!(ds.val.len(), 4);
    let all: BTreeSet<usize> = ds
        .train
        .iter()
        .chain(&ds.val)
        .chain(&ds.test)
        .copied()
        .collect();
    assert_eq!(all.len(), 1309, "splits overlap or drop rows");
    assert!(ds.warnings.is_empty());
}

#[test]
fn split_depends_only_on_seed() {
    let spec = titanic();
    let t = load_csv(&spec).unwrap();
    let a = balanced_split(&t, &spec).unwrap();
    let b = balanced_split(&t, &spec).unwrap();
    assert_eq!(
        (a.train.clone(), a.val.clone(), a.test.clone()),
        (b.train, b.val, b.test)
    );
    let other = DatasetSpec {
        split_seed: 1,
        ..spec
    };
    let c = balanced_split(&t, &other).unwrap();
    assert_ne!(a.test, c.test);
}

#[test]
fn standardization_uses_training_rows_only() {
    let ds = prepare(&titanic()).unwrap();
    let st = ds.standardization.as_ref().unwrap();
    for j in 0..ds.features.cols() {
        let n = ds.train.len() as f64;
        let mean: f64 = ds.train.iter().map(|&i| ds.features.get(i, j)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "column {j} train mean {mean}");
        if st.std[j] > 0.0 {
            let var: f64 = ds
                .train
                .iter()
                .map(|&i| ds.features.get(i, j).powi(2))
                .sum::<f64>()
                / n;
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn missing_value_names_row_and_column() {
    let spec = DatasetSpec {
        name: "m".into(),
        path: "unused".into(),
        label_column: "y".into(),
        favorable_label: "1".into(),
        sensitive_column: "s".into(),
        sensitive_threshold: None,
        categorical_columns: vec!["s".into()],
        drop_columns: vec![],
        test_fraction: 0.1,
        test_cell_count: None,
        val_cell_count: 1,
        split_seed: 0,
        training: None,
    };
    let csv = "s,a,y\nf,1.0,1\nm,,0\n";
    let err = read_table(csv.as_bytes(), &spec).unwrap_err().to_string();
    assert!(err.contains('a') && err.contains('3'), "{err}");
}

#[test]
fn missing_dataset_file_is_an_error() {
    let spec = DatasetSpec {
        path: "/nonexistent/file.csv".into(),
        ..titanic()
    };
    assert!(load_csv(&spec).is_err());
}
