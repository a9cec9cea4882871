//! Black-box predictors: built-in linear/logistic models and an external
//! process speaking a line-oriented CSV protocol.
//!
//! External protocol: the request is one CSV row of `d` decimal fields per
//! point, newline terminated, written to the child's stdin, which is then
//! closed. The response is one decimal per line on stdout, same count and
//! order. A nonzero exit status is a failure.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Command, Stdio};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Row-major point matrix with `d` columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Points {
    d: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(d: usize) -> Self {
        Points { d, data: Vec::new() }
    }

    pub fn with_capacity(d: usize, rows: usize) -> Self {
        Points {
            d,
            data: Vec::with_capacity(d * rows),
        }
    }

    pub fn from_flat(d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 || !data.len().is_multiple_of(d) {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form rows of width {d}",
                data.len()
            )));
        }
        Ok(Points { d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut p = Points::with_capacity(d, rows.len());
        for r in rows {
            if r.len() != d {
                return Err(Error::LengthMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            p.data.extend_from_slice(r);
        }
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        if self.d == 0 {
            0
        } else {
            self.data.len() / self.d
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.d);
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    fn slice_rows(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.d..end * self.d]
    }
}

/// External prediction command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalCommand {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    /// Number of independent child processes a large request is split across.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl ExternalCommand {
    pub fn new<S: Into<String>>(command: impl IntoIterator<Item = S>) -> Self {
        ExternalCommand {
            command: command.into_iter().map(Into::into).collect(),
            workers: 1,
        }
    }

    /// Parses a shell-style command string by splitting on whitespace.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<String> = spec.split_whitespace().map(String::from).collect();
        if parts.is_empty() {
            return Err(Error::InvalidArgument("empty external command".into()));
        }
        Ok(ExternalCommand {
            command: parts,
            workers: 1,
        })
    }

    pub fn predict(&self, points: &Points) -> Result<Vec<f64>> {
        if self.command.is_empty() {
            return Err(Error::Model("empty external command".into()));
        }
        let n = points.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let workers = self.workers.clamp(1, n);
        if workers == 1 {
            return self.run(points.d(), points.as_flat());
        }
        let chunk = n.div_ceil(workers);
        let ranges: Vec<(usize, usize)> = (0..n)
            .step_by(chunk)
            .map(|s| (s, (s + chunk).min(n)))
            .collect();
        let results: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .map(|&(s, e)| scope.spawn(move || self.run(points.d(), points.slice_rows(s, e))))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Model("worker panicked".into()))))
                .collect()
        });
        let mut out = Vec::with_capacity(n);
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    fn run(&self, d: usize, flat: &[f64]) -> Result<Vec<f64>> {
        let expected = flat.len() / d;
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Model(format!("cannot spawn `{}`: {e}", self.command[0])))?;

        let mut request = String::with_capacity(flat.len() * 8);
        for row in flat.chunks_exact(d) {
            write_csv_row(&mut request, row);
        }
        let mut stdin = child.stdin.take().expect("stdin piped");
        let writer = std::thread::spawn(move || {
            // a child that exits early closes the pipe; report that via the exit status
            let _ = stdin.write_all(request.as_bytes());
        });
        let mut stderr = child.stderr.take().expect("stderr piped");
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });
        let stdout = child.stdout.take().expect("stdout piped");
        let mut out = Vec::with_capacity(expected);
        let mut parse_error = None;
        for (k, line) in BufReader::new(stdout).lines().enumerate() {
            let line = line.map_err(|e| Error::Model(format!("reading model output: {e}")))?;
            let s = line.trim();
            if s.is_empty() {
                continue;
            }
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => out.push(v),
                Ok(_) => {
                    parse_error.get_or_insert(format!("line {}: non-finite prediction `{s}`", k + 1));
                }
                Err(_) => {
                    parse_error.get_or_insert(format!("line {}: cannot parse `{s}`", k + 1));
                }
            }
        }
        let _ = writer.join();
        let status = child
            .wait()
            .map_err(|e| Error::Model(format!("waiting for model: {e}")))?;
        let stderr_text = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(Error::Model(format!(
                "`{}` exited with {status}: {}",
                self.command.join(" "),
                stderr_text.trim()
            )));
        }
        if let Some(msg) = parse_error {
            return Err(Error::Model(msg));
        }
        if out.len() != expected {
            return Err(Error::Model(format!(
                "expected {expected} predictions, got {}",
                out.len()
            )));
        }
        Ok(out)
    }
}

/// Appends one request line.
pub fn write_csv_row(buf: &mut String, row: &[f64]) {
    use std::fmt::Write as _;
    for (k, v) in row.iter().enumerate() {
        if k > 0 {
            buf.push(',');
        }
        let _ = write!(buf, "{v}");
    }
    buf.push('\n');
}

/// The predictor `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelAdapter {
    Linear {
        coefficients: Vec<f64>,
        intercept: f64,
    },
    Logistic {
        coefficients: Vec<f64>,
        intercept: f64,
    },
    External(ExternalCommand),
}

impl ModelAdapter {
    /// Expected input width, when the model knows it.
    pub fn dim(&self) -> Option<usize> {
        match self {
            ModelAdapter::Linear { coefficients, .. } | ModelAdapter::Logistic { coefficients, .. } => {
                Some(coefficients.len())
            }
            ModelAdapter::External(_) => None,
        }
    }

    pub fn predict(&self, points: &Points) -> Result<Vec<f64>> {
        if let Some(d) = self.dim() {
            if points.d() != d && !points.is_empty() {
                return Err(Error::LengthMismatch {
                    expected: d,
                    found: points.d(),
                });
            }
        }
        match self {
            ModelAdapter::Linear {
                coefficients,
                intercept,
            } => Ok(points.rows().map(|r| linear(coefficients, *intercept, r)).collect()),
            ModelAdapter::Logistic {
                coefficients,
                intercept,
            } => Ok(points
                .rows()
                .map(|r| sigmoid(linear(coefficients, *intercept, r)))
                .collect()),
            ModelAdapter::External(cmd) => cmd.predict(points),
        }
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        let p = Points::from_flat(x.len(), x.to_vec())?;
        Ok(self.predict(&p)?[0])
    }

    /// Predictions at every dataset row.
    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<f64>> {
        self.predict(&Points::from_flat(ds.d(), ds.values().to_vec())?)
    }
}

#[inline]
fn linear(coefficients: &[f64], intercept: f64, x: &[f64]) -> f64 {
    intercept + coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

#[inline]
fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn design(ds: &Dataset) -> DMatrix<f64> {
    let (n, d) = (ds.n(), ds.d());
    DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { ds.value(i, j - 1) })
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares. Converged when the largest coefficient step is below `tolerance`.
pub fn fit_logistic(ds: &Dataset, labels: &[f64], iterations: usize, tolerance: f64) -> Result<ModelAdapter> {
    if labels.len() != ds.n() {
        return Err(Error::LengthMismatch {
            expected: ds.n(),
            found: labels.len(),
        });
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Separation(format!(
            "all labels are {}; the intercept diverges",
            if positives == 0 { 0 } else { 1 }
        )));
    }
    let x = design(ds);
    let y = DVector::from_column_slice(labels);
    let p_dim = x.ncols();
    let mut beta = DVector::<f64>::zeros(p_dim);
    for _ in 0..iterations {
        let eta = &x * &beta;
        let prob = eta.map(sigmoid);
        if prob.iter().zip(y.iter()).all(|(p, y)| (p - y).abs() < 1e-9) {
            return Err(Error::Separation(
                "fitted probabilities reached 0/1 on every row (perfect separation)".into(),
            ));
        }
        let w = prob.map(|p| (p * (1.0 - p)).max(1e-12));
        let mut xtwx = DMatrix::<f64>::zeros(p_dim, p_dim);
        for i in 0..x.nrows() {
            let row = x.row(i);
            xtwx += w[i] * row.transpose() * row;
        }
        let grad = x.transpose() * (&y - &prob);
        let step = xtwx
            .clone()
            .cholesky()
            .map(|c| c.solve(&grad))
            .or_else(|| xtwx.lu().solve(&grad))
            .ok_or_else(|| Error::Separation("singular information matrix".into()))?;
        beta += &step;
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Separation("coefficients diverged".into()));
        }
        if step.amax() < tolerance {
            return Ok(ModelAdapter::Logistic {
                coefficients: beta.iter().skip(1).copied().collect(),
                intercept: beta[0],
            });
        }
    }
    Err(Error::NonConvergence { iterations })
}

/// Ordinary least squares with intercept.
pub fn fit_linear(ds: &Dataset, response: &[f64]) -> Result<ModelAdapter> {
    if response.len() != ds.n() {
        return Err(Error::LengthMismatch {
            expected: ds.n(),
            found: response.len(),
        });
    }
    let x = design(ds);
    let y = DVector::from_column_slice(response);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * y;
    let beta = xtx
        .cholesky()
        .map(|c| c.solve(&xty))
        .ok_or_else(|| Error::InvalidArgument("design matrix is rank deficient".into()))?;
    Ok(ModelAdapter::Linear {
        coefficients: beta.iter().skip(1).copied().collect(),
        intercept: beta[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ColumnKind, ColumnSchema};

    fn one_col(xs: &[f64]) -> Dataset {
        let schema = vec![ColumnSchema::new("x", ColumnKind::Numeric)];
        Dataset::from_rows(schema, xs.iter().map(|&v| vec![v]).collect()).unwrap()
    }

    #[test]
    fn linear_prediction() {
        let m = ModelAdapter::Linear {
            coefficients: vec![2.0, 1.0, 0.0],
            intercept: 0.0,
        };
        assert_eq!(m.predict_one(&[1.0, 1.0, 1.0]).unwrap(), 3.0);
        let bad = Points::from_flat(2, vec![1.0, 2.0]).unwrap();
        assert!(m.predict(&bad).is_err());
    }

    #[test]
    fn logistic_in_unit_interval() {
        let m = ModelAdapter::Logistic {
            coefficients: vec![50.0],
            intercept: -3.0,
        };
        for x in [-1e6, -10.0, 0.0, 0.3, 10.0, 1e6] {
            let p = m.predict_one(&[x]).unwrap();
            assert!((0.0..=1.0).contains(&p), "{p}");
        }
    }

    #[test]
    fn logistic_fit_recovers_known_coefficients() {
        // grouped data with exact proportions: logit p = -1 + 0.5 x
        let xs: Vec<f64> = (0..9).map(|k| k as f64 - 4.0).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &x in &xs {
            let p = sigmoid(-1.0 + 0.5 * x);
            let ones = (p * 1000.0).round() as usize;
            for k in 0..1000 {
                rows.push(x);
                labels.push(if k < ones { 1.0 } else { 0.0 });
            }
        }
        let ds = one_col(&rows);
        match fit_logistic(&ds, &labels, 50, 1e-10).unwrap() {
            ModelAdapter::Logistic {
                coefficients,
                intercept,
            } => {
                assert!((intercept + 1.0).abs() < 5e-3, "{intercept}");
                assert!((coefficients[0] - 0.5).abs() < 5e-3, "{coefficients:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn logistic_degenerate_cases() {
        let ds = one_col(&[0.0, 1.0, 2.0, 3.0]);
        assert!(matches!(
            fit_logistic(&ds, &[0.0, 0.0, 0.0, 0.0], 100, 1e-8),
            Err(Error::Separation(_))
        ));
        let sep = fit_logistic(&ds, &[0.0, 0.0, 1.0, 1.0], 100, 1e-8);
        assert!(
            matches!(sep, Err(Error::Separation(_)) | Err(Error::NonConvergence { .. })),
            "{sep:?}"
        );
        assert!(matches!(
            fit_logistic(&ds, &[0.0, 1.0], 10, 1e-8),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ols_exact_fit() {
        let ds = one_col(&[0.0, 1.0, 2.0, 3.0]);
        let m = fit_linear(&ds, &[1.0, 3.0, 5.0, 7.0]).unwrap();
        let p = m.predict_dataset(&ds).unwrap();
        for (a, b) in p.iter().zip([1.0, 3.0, 5.0, 7.0]) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn external_constant_and_failures() {
        let pts = Points::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let constant = ExternalCommand::new(["sh", "-c", "while read l; do echo 4.5; done"]);
        assert_eq!(constant.predict(&pts).unwrap(), vec![4.5; 3]);

        let sum = ExternalCommand::new(["awk", "-F,", "{print $1 + 10 * $2}"]);
        assert_eq!(sum.predict(&pts).unwrap(), vec![21.0, 43.0, 65.0]);
        let pooled = ExternalCommand { workers: 2, ..sum };
        assert_eq!(pooled.predict(&pts).unwrap(), vec![21.0, 43.0, 65.0]);

        let fails = ExternalCommand::new(["sh", "-c", "cat > /dev/null; exit 3"]);
        assert!(matches!(fails.predict(&pts), Err(Error::Model(_))));
        let short = ExternalCommand::new(["sh", "-c", "cat > /dev/null; echo 1"]);
        assert!(matches!(short.predict(&pts), Err(Error::Model(m)) if m.contains("expected 3")));
        let garbled = ExternalCommand::new(["sh", "-c", "while read l; do echo abc; done"]);
        assert!(matches!(garbled.predict(&pts), Err(Error::Model(_))));
        let nonfinite = ExternalCommand::new(["sh", "-c", "while read l; do echo inf; done"]);
        assert!(matches!(nonfinite.predict(&pts), Err(Error::Model(_))));
    }

    #[test]
    fn request_format() {
        let mut s = String::new();
        write_csv_row(&mut s, &[1.0, 0.5, -2.25]);
        assert_eq!(s, "1,0.5,-2.25\n");
    }

    #[test]
    fn adapter_json() {
        let m: ModelAdapter =
            serde_json::from_str(r#"{"kind":"external","command":["python3","m.py"],"workers":2}"#).unwrap();
        assert!(matches!(m, ModelAdapter::External(ExternalCommand { workers: 2, .. })));
        let m: ModelAdapter =
            serde_json::from_str(r#"{"kind":"linear","coefficients":[1,2],"intercept":0.5}"#).unwrap();
        assert_eq!(m.dim(), Some(2));
    }
}
