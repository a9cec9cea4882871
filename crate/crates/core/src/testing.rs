//! Small deterministic fixtures shared by unit tests, integration tests and benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ColumnKind, ColumnSchema, Dataset};

/// Full factorial on three binary predictors, rows in binary order
/// `(x1, x2, x3)` with `x1` most significant, predictions `y = 2 x1 + x2`.
/// Row 8 (index 7) is the target `(1, 1, 1)`.
pub fn t8() -> Dataset {
    let schema = ["x1", "x2", "x3"]
        .iter()
        .map(|n| ColumnSchema::new(*n, ColumnKind::Binary))
        .collect();
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|i| vec![(i >> 2 & 1) as f64, (i >> 1 & 1) as f64, (i & 1) as f64])
        .collect();
    let y = rows.iter().map(|r| 2.0 * r[0] + r[1]).collect();
    Dataset::from_rows(schema, rows)
        .and_then(|ds| ds.attach_predictions(y))
        .expect("t8 fixture is valid")
}

/// Numeric columns on a coarse grid (so cohorts have ties) with a nonlinear,
/// interacting prediction attached.
pub fn random_dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = (0..d)
        .map(|j| ColumnSchema::new(format!("x{}", j + 1), ColumnKind::Numeric))
        .collect();
    let levels: Vec<u32> = (0..d).map(|_| rng.random_range(2..8)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut row = Vec::with_capacity(d);
            for j in 0..d {
                let base = rng.random_range(0..levels[j]) as f64;
                // correlate neighbouring columns a little
                let v = if j > 0 && rng.random_bool(0.3) { row[j - 1] } else { base };
                row.push(v * 0.5);
            }
            row
        })
        .collect();
    let y = rows
        .iter()
        .map(|r| {
            let mut s = 0.0;
            for (j, &x) in r.iter().enumerate() {
                s += (j as f64 + 1.0).sqrt() * x;
            }
            if d >= 2 {
                s += r[0] * r[1];
            }
            s + 0.1 * rng.random::<f64>()
        })
        .collect();
    Dataset::from_rows(schema, rows)
        .and_then(|ds| ds.attach_predictions(y))
        .expect("random fixture is valid")
}
