//! Typed tabular predictors plus per-row predictions.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Binary,
}

impl ColumnKind {
    pub fn is_numeric(self) -> bool {
        !matches!(self, ColumnKind::Categorical)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSchema {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        ColumnSchema {
            name: name.into(),
            kind,
        }
    }
}

/// Ordered column list. In JSON it is an object mapping column name to kind;
/// key order is the column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    try_from = "serde_json::Map<String, serde_json::Value>",
    into = "serde_json::Map<String, serde_json::Value>"
)]
pub struct Schema(pub Vec<ColumnSchema>);

impl TryFrom<serde_json::Map<String, serde_json::Value>> for Schema {
    type Error = String;

    fn try_from(map: serde_json::Map<String, serde_json::Value>) -> Result<Self, String> {
        map.into_iter()
            .map(|(name, kind)| {
                serde_json::from_value::<ColumnKind>(kind)
                    .map(|kind| ColumnSchema { name: name.clone(), kind })
                    .map_err(|e| format!("column `{name}`: {e}"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Schema)
    }
}

impl From<Schema> for serde_json::Map<String, serde_json::Value> {
    fn from(s: Schema) -> Self {
        s.0.into_iter()
            .map(|c| (c.name, serde_json::to_value(c.kind).expect("kind serializes")))
            .collect()
    }
}

impl Schema {
    pub fn columns(&self) -> &[ColumnSchema] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `n x d` predictor matrix with typed columns and optional predictions `y_i = f(x_i)`.
///
/// Categorical cells are stored as integer codes (as `f64`) in order of first
/// appearance; the original labels are kept for serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Vec<ColumnSchema>,
    n: usize,
    values: Vec<f64>,
    levels: Vec<Vec<String>>,
    predictions: Option<Vec<f64>>,
}

impl Dataset {
    /// Builds a dataset from row vectors. Categorical columns must already hold
    /// non-negative integer codes.
    pub fn from_rows(schema: Vec<ColumnSchema>, rows: Vec<Vec<f64>>) -> Result<Self> {
        validate_schema(&schema)?;
        if rows.is_empty() {
            return Err(Error::NoRows);
        }
        let d = schema.len();
        let n = rows.len();
        let mut values = Vec::with_capacity(n * d);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(Error::RowLength {
                    line: i as u64 + 1,
                    expected: d,
                    found: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                check_cell(&schema[j], v, i as u64 + 1)?;
            }
            values.extend(row);
        }
        let levels = schema
            .iter()
            .enumerate()
            .map(|(j, c)| match c.kind {
                ColumnKind::Categorical => {
                    let max = (0..n).map(|i| values[i * d + j] as usize).max().unwrap_or(0);
                    (0..=max).map(|k| k.to_string()).collect()
                }
                _ => Vec::new(),
            })
            .collect();
        Ok(Dataset {
            schema,
            n,
            values,
            levels,
            predictions: None,
        })
    }

    /// Reads CSV with a header row. Only schema columns (and the optional
    /// prediction column) are read; other columns are ignored.
    pub fn from_reader<R: Read>(
        reader: R,
        schema: &[ColumnSchema],
        prediction_column: Option<&str>,
    ) -> Result<Self> {
        validate_schema(schema)?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let width = header.len();
        let position: HashMap<&str, usize> =
            header.iter().enumerate().map(|(k, h)| (h.trim(), k)).collect();
        let lookup = |name: &str| {
            position
                .get(name)
                .copied()
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let idx: Vec<usize> = schema.iter().map(|c| lookup(&c.name)).collect::<Result<_>>()?;
        let pred_idx = prediction_column.map(lookup).transpose()?;

        let d = schema.len();
        let mut values = Vec::new();
        let mut preds = Vec::new();
        let mut interners: Vec<HashMap<String, usize>> = vec![HashMap::new(); d];
        let mut levels: Vec<Vec<String>> = vec![Vec::new(); d];
        let mut n = 0usize;
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(n as u64 + 2, |p| p.line());
            if record.len() != width {
                return Err(Error::RowLength {
                    line,
                    expected: width,
                    found: record.len(),
                });
            }
            for (j, col) in schema.iter().enumerate() {
                let raw = record[idx[j]].trim();
                let v = match col.kind {
                    ColumnKind::Categorical => {
                        if raw.is_empty() {
                            return Err(unparseable(line, col, raw, "missing value"));
                        }
                        let next = interners[j].len();
                        let code = *interners[j].entry(raw.to_string()).or_insert_with(|| {
                            levels[j].push(raw.to_string());
                            next
                        });
                        code as f64
                    }
                    _ => parse_number(raw).map_err(|reason| unparseable(line, col, raw, reason))?,
                };
                check_cell(col, v, line)?;
                values.push(v);
            }
            if let Some(p) = pred_idx {
                let raw = record[p].trim();
                let v = parse_number(raw).map_err(|reason| Error::UnparseableCell {
                    line,
                    column: prediction_column.unwrap_or_default().to_string(),
                    value: raw.to_string(),
                    reason,
                })?;
                preds.push(v);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::NoRows);
        }
        Ok(Dataset {
            schema: schema.to_vec(),
            n,
            values,
            levels,
            predictions: pred_idx.map(|_| preds),
        })
    }

    /// Writes the predictor columns (and predictions, when attached, under
    /// `prediction_column`) as CSV. Categoricals are written as their labels.
    pub fn write_csv<W: Write>(&self, writer: W, prediction_column: Option<&str>) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.schema.iter().map(|c| c.name.as_str()).collect();
        let with_preds = match (prediction_column, &self.predictions) {
            (Some(name), Some(_)) => {
                header.push(name);
                true
            }
            _ => false,
        };
        w.write_record(&header)?;
        let mut fields = Vec::with_capacity(header.len());
        for i in 0..self.n {
            fields.clear();
            for (j, col) in self.schema.iter().enumerate() {
                let v = self.value(i, j);
                fields.push(match col.kind {
                    ColumnKind::Categorical => self.levels[j][v as usize].clone(),
                    _ => format!("{v}"),
                });
            }
            if with_preds {
                fields.push(format!("{}", self.predictions.as_ref().unwrap()[i]));
            }
            w.write_record(&fields)?;
        }
        w.flush()?;
        Ok(())
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.schema.len()
    }

    pub fn schema(&self) -> &[ColumnSchema] {
        &self.schema
    }

    pub fn names(&self) -> Vec<String> {
        self.schema.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d() + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.values[i * d..(i + 1) * d]
    }

    /// Row-major `n x d` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.value(i, j)).collect()
    }

    /// Labels of a categorical column, indexed by code.
    pub fn levels(&self, j: usize) -> &[String] {
        &self.levels[j]
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.d())
            .map(|j| crate::par::pairwise_sum(&self.column(j)) / self.n as f64)
            .collect()
    }

    pub fn has_predictions(&self) -> bool {
        self.predictions.is_some()
    }

    pub fn predictions(&self) -> Result<&[f64]> {
        self.predictions.as_deref().ok_or(Error::MissingPredictions)
    }

    /// Sets `y`. Also used to substitute observed responses for predictions
    /// (nearest-neighbor-rule mode).
    pub fn attach_predictions(mut self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                found: y.len(),
            });
        }
        if let Some(k) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("prediction {} is not finite", k + 1)));
        }
        self.predictions = Some(y);
        Ok(self)
    }

    /// Rows `rows` (in the given order) as a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let d = self.d();
        let mut values = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            schema: self.schema.clone(),
            n: rows.len(),
            values,
            levels: self.levels.clone(),
            predictions: self
                .predictions
                .as_ref()
                .map(|p| rows.iter().map(|&i| p[i]).collect()),
        }
    }

    /// Order-statistic quantile with linear interpolation between adjacent
    /// order statistics (position `(n-1)p`).
    pub fn quantile(&self, column: usize, p: f64) -> Result<f64> {
        let col = self
            .schema
            .get(column)
            .ok_or_else(|| Error::InvalidArgument(format!("column {column} out of range")))?;
        if !col.kind.is_numeric() {
            return Err(Error::NonNumericColumn(col.name.clone()));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
        let mut xs = self.column(column);
        xs.sort_by(f64::total_cmp);
        Ok(interpolated_quantile(&xs, p))
    }

    /// Uniform random partition into `(train, test)` with `|test| = round(fraction * n)`.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train, test) = holdout_indices(&mut rng, self.n, fraction)?;
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Reads a CSV with the given schema; see [`Dataset::from_reader`].
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &[ColumnSchema],
    prediction_column: Option<&str>,
) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    Dataset::from_reader(std::io::BufReader::new(file), schema, prediction_column)
}

/// Reads one numeric column (labels, responses, predictions) from a CSV with a header.
pub fn load_column(path: impl AsRef<Path>, name: &str) -> Result<Vec<f64>> {
    let schema = [ColumnSchema::new(name, ColumnKind::Numeric)];
    let ds = load_csv(path, &schema, None)?;
    Ok(ds.column(0))
}

/// Sorted-input quantile, type 7.
pub fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Shuffled `(train, test)` index sets; test indices keep the shuffled order.
pub fn holdout_indices<R: rand::Rng>(
    rng: &mut R,
    n: usize,
    fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction {fraction} must lie in (0, 1)"
        )));
    }
    let k = (fraction * n as f64).round() as usize;
    if k < 1 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction {fraction} on {n} rows leaves an empty split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let test = idx[..k].to_vec();
    let train = idx[k..].to_vec();
    Ok((train, test))
}

fn validate_schema(schema: &[ColumnSchema]) -> Result<()> {
    if schema.is_empty() {
        return Err(Error::InvalidArgument("schema has no columns".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for c in schema {
        if !seen.insert(c.name.as_str()) {
            return Err(Error::DuplicateColumn(c.name.clone()));
        }
    }
    Ok(())
}

fn parse_number(raw: &str) -> std::result::Result<f64, &'static str> {
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
        return Err("missing value");
    }
    let v: f64 = raw.parse().map_err(|_| "not a number")?;
    if !v.is_finite() {
        return Err("not finite");
    }
    Ok(v)
}

fn unparseable(line: u64, col: &ColumnSchema, raw: &str, reason: &'static str) -> Error {
    Error::UnparseableCell {
        line,
        column: col.name.clone(),
        value: raw.to_string(),
        reason,
    }
}

fn check_cell(col: &ColumnSchema, v: f64, line: u64) -> Result<()> {
    let bad = |reason| Error::UnparseableCell {
        line,
        column: col.name.clone(),
        value: format!("{v}"),
        reason,
    };
    if !v.is_finite() {
        return Err(bad("not finite"));
    }
    match col.kind {
        ColumnKind::Binary if v != 0.0 && v != 1.0 => Err(bad("binary column must be 0 or 1")),
        ColumnKind::Categorical if v < 0.0 || v.fract() != 0.0 => {
            Err(bad("categorical code must be a non-negative integer"))
        }
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn numeric(names: &[&str]) -> Vec<ColumnSchema> {
        names
            .iter()
            .map(|n| ColumnSchema::new(*n, ColumnKind::Numeric))
            .collect()
    }

    #[test]
    fn loads_and_interns_categoricals() {
        let csv = "a,b,c\n1,x,0\n2,y,1\n3,x,1\n";
        let schema = vec![
            ColumnSchema::new("a", ColumnKind::Numeric),
            ColumnSchema::new("b", ColumnKind::Categorical),
            ColumnSchema::new("c", ColumnKind::Binary),
        ];
        let ds = Dataset::from_reader(csv.as_bytes(), &schema, None).unwrap();
        assert_eq!((ds.n(), ds.d()), (3, 3));
        assert_eq!(ds.column(1), vec![0.0, 1.0, 0.0]);
        assert_eq!(ds.levels(1), ["x", "y"]);
        assert!(!ds.has_predictions());
    }

    #[test]
    fn reports_errors_with_location() {
        let schema = numeric(&["a", "b"]);
        match Dataset::from_reader("a,b\n1,2\n3,zz\n".as_bytes(), &schema, None) {
            Err(Error::UnparseableCell { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Dataset::from_reader("a,c\n1,2\n".as_bytes(), &schema, None),
            Err(Error::MissingColumn(c)) if c == "b"
        ));
        assert!(matches!(
            Dataset::from_reader("a,b\n1,2\n3\n".as_bytes(), &schema, None),
            Err(Error::RowLength { line: 3, .. })
        ));
        assert!(matches!(
            Dataset::from_reader("a,b\n".as_bytes(), &schema, None),
            Err(Error::NoRows)
        ));
        assert!(matches!(
            Dataset::from_reader("a,b\n1,\n".as_bytes(), &schema, None),
            Err(Error::UnparseableCell { reason: "missing value", .. })
        ));
    }

    #[test]
    fn binary_column_rejects_other_values() {
        let schema = vec![ColumnSchema::new("s", ColumnKind::Binary)];
        assert!(Dataset::from_reader("s\n2\n".as_bytes(), &schema, None).is_err());
    }

    #[test]
    fn prediction_column_and_attach() {
        let schema = numeric(&["a"]);
        let ds = Dataset::from_reader("a,y\n1,0.5\n2,0.25\n".as_bytes(), &schema, Some("y")).unwrap();
        assert_eq!(ds.predictions().unwrap(), &[0.5, 0.25]);

        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let ds = Dataset::from_rows(numeric(&["a"]), rows).unwrap();
        assert!(ds.clone().attach_predictions(vec![0.0; 8]).is_ok());
        assert!(matches!(
            ds.attach_predictions(vec![0.0; 7]),
            Err(Error::LengthMismatch { expected: 8, found: 7 })
        ));
    }

    #[test]
    fn quantiles() {
        let ds = Dataset::from_rows(numeric(&["a"]), (1..=5).map(|v| vec![v as f64]).collect()).unwrap();
        assert_eq!(ds.quantile(0, 0.5).unwrap(), 3.0);
        assert_eq!(ds.quantile(0, 0.0).unwrap(), 1.0);
        assert_eq!(ds.quantile(0, 1.0).unwrap(), 5.0);
        let ds = Dataset::from_rows(numeric(&["a"]), vec![vec![10.0], vec![0.0]]).unwrap();
        assert!((ds.quantile(0, 0.95).unwrap() - 9.5).abs() < 1e-12);
        assert!(ds.quantile(0, 1.5).is_err());

        let cat = vec![ColumnSchema::new("c", ColumnKind::Categorical)];
        let ds = Dataset::from_rows(cat, vec![vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(ds.quantile(0, 0.5), Err(Error::NonNumericColumn(_))));
    }

    #[test]
    fn holdout_partition() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ds = Dataset::from_rows(numeric(&["a"]), rows).unwrap();
        let (train, test) = ds.split_holdout(0.3, 7).unwrap();
        assert_eq!((train.n(), test.n()), (7, 3));
        let mut all: Vec<f64> = train.column(0).into_iter().chain(test.column(0)).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        let (train2, test2) = ds.split_holdout(0.3, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert!(ds.split_holdout(0.0, 1).is_err());
        assert!(ds.split_holdout(1.0, 1).is_err());
        assert!(ds.split_holdout(0.01, 1).is_err());
    }

    #[test]
    fn schema_json_keeps_order() {
        let s: Schema = serde_json::from_str(r#"{"z":"numeric","a":"categorical","m":"binary"}"#).unwrap();
        let names: Vec<_> = s.columns().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["z", "a", "m"]);
        assert_eq!(s.columns()[1].kind, ColumnKind::Categorical);
        assert!(serde_json::from_str::<Schema>(r#"{"z":"text"}"#).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            rows in proptest::collection::vec((-1e6f64..1e6, 0usize..4, any::<bool>()), 1..40)
        ) {
            let schema = vec![
                ColumnSchema::new("x", ColumnKind::Numeric),
                ColumnSchema::new("c", ColumnKind::Categorical),
                ColumnSchema::new("b", ColumnKind::Binary),
            ];
            let mut text = String::from("x,c,b\n");
            for (x, c, b) in &rows {
                text.push_str(&format!("{x},L{c},{}\n", *b as u8));
            }
            let ds = Dataset::from_reader(text.as_bytes(), &schema, None).unwrap();
            let mut buf = Vec::new();
            ds.write_csv(&mut buf, None).unwrap();
            let again = Dataset::from_reader(buf.as_slice(), &schema, None).unwrap();
            prop_assert_eq!(ds, again);
        }

        #[test]
        fn quantile_monotone(xs in proptest::collection::vec(-100f64..100.0, 1..50), p in 0f64..1.0, q in 0f64..1.0) {
            let ds = Dataset::from_rows(numeric(&["a"]), xs.into_iter().map(|v| vec![v]).collect()).unwrap();
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            prop_assert!(ds.quantile(0, lo).unwrap() <= ds.quantile(0, hi).unwrap());
        }
    }
}
