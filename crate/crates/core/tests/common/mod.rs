#![allow(dead_code)]

use std::path::PathBuf;

use cohort_shapley::dataset::{load_column, load_csv, ColumnKind, ColumnSchema, Dataset};
use cohort_shapley::model::{fit_logistic, ModelAdapter};
use cohort_shapley::subset::Subset;
use rand::Rng;

/// Average of marginal contributions over all `d!` orderings, enumerated by
/// Heap's algorithm.
pub fn permutation_oracle(d: usize, v: impl Fn(Subset) -> f64) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..d).collect();
    let mut phi = vec![0.0; d];
    let mut count = 0u64;
    let mut visit = |p: &[usize]| {
        let mut u = Subset::EMPTY;
        let mut prev = v(u);
        for &j in p {
            u = u.with(j);
            let cur = v(u);
            phi[j] += cur - prev;
            prev = cur;
        }
        count += 1;
    };
    let mut c = vec![0usize; d];
    visit(&perm);
    let mut i = 0;
    while i < d {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    phi.iter().map(|p| p / count as f64).collect()
}

/// A game table with `v(empty) = 0` and standard-normal-ish entries.
pub fn random_table<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    let mut t: Vec<f64> = (0..1usize << d).map(|_| rng.random_range(-1.0..1.0) * 3.0).collect();
    t[0] = 0.0;
    t
}

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn titanic_schema() -> Vec<ColumnSchema> {
    vec![
        ColumnSchema::new("pclass", ColumnKind::Numeric),
        ColumnSchema::new("sex", ColumnKind::Binary),
        ColumnSchema::new("age", ColumnKind::Numeric),
        ColumnSchema::new("sibsp", ColumnKind::Numeric),
        ColumnSchema::new("parch", ColumnKind::Numeric),
        ColumnSchema::new("fare", ColumnKind::Numeric),
    ]
}

pub const BOSTON_COLUMNS: [&str; 13] = [
    "CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE", "DIS", "RAD", "TAX", "PTRATIO", "B", "LSTAT",
];

pub fn boston_schema() -> Vec<ColumnSchema> {
    BOSTON_COLUMNS
        .iter()
        .map(|&c| {
            let kind = if c == "CHAS" { ColumnKind::Binary } else { ColumnKind::Numeric };
            ColumnSchema::new(c, kind)
        })
        .collect()
}

pub fn titanic() -> Dataset {
    load_csv(data_dir().join("titanic.csv"), &titanic_schema(), None).expect("titanic.csv")
}

pub fn boston() -> Dataset {
    load_csv(data_dir().join("boston.csv"), &boston_schema(), None).expect("boston.csv")
}

/// Titanic with logistic-regression survival probabilities attached as predictions.
pub fn titanic_with_model() -> (Dataset, ModelAdapter) {
    let ds = titanic();
    let labels = load_column(data_dir().join("titanic.csv"), "survived").unwrap();
    let model = fit_logistic(&ds, &labels, 100, 1e-10).unwrap();
    let y = model.predict_dataset(&ds).unwrap();
    (ds.attach_predictions(y).unwrap(), model)
}
