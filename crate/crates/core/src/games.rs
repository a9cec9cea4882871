//! Value functions over feature subsets.
//!
//! Every construction here satisfies `value({}) == 0.0` exactly. Games expose
//! three access paths: a single coalition, the full `2^d` lattice table (used
//! by the exact engine) and the values along one permutation (used by the
//! Monte Carlo engine). Cohort games refine bitmasks incrementally on the
//! latter two paths; model-backed games batch their model calls.

use serde::{Deserialize, Serialize};

use crate::bitset::{Bitset, MaskedSummer};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelAdapter, Points};
use crate::par;
use crate::similarity::{SimilarityMatrix, SimilarityRules};
use crate::subset::{Subset, MAX_FEATURES};

/// Largest `d` for which a full lattice table is materialized.
pub const EXACT_CAP: usize = 20;

/// Most points sent to a model in one call when tabulating a lattice.
pub const MAX_BATCH_POINTS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cs,
    Cs2,
    Bs,
    Bs2,
    Abs,
    Abs2,
    Var,
    Table,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cs => "cs",
            Method::Cs2 => "cs2",
            Method::Bs => "bs",
            Method::Bs2 => "bs2",
            Method::Abs => "abs",
            Method::Abs2 => "abs2",
            Method::Var => "var",
            Method::Table => "table",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::Bs | Method::Bs2 | Method::Abs | Method::Abs2)
    }

    pub fn is_squared(self) -> bool {
        matches!(self, Method::Cs2 | Method::Bs2 | Method::Abs2 | Method::Var)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cs" => Method::Cs,
            "cs2" => Method::Cs2,
            "bs" => Method::Bs,
            "bs2" => Method::Bs2,
            "abs" => Method::Abs,
            "abs2" => Method::Abs2,
            "var" => Method::Var,
            other => return Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GameInfo {
    pub method: Method,
    /// Zero-based subject index, for local games.
    pub target: Option<usize>,
}

pub trait Game: Sync {
    fn dim(&self) -> usize;

    fn info(&self) -> GameInfo;

    fn value(&self, u: Subset) -> Result<f64>;

    /// All `2^d` values, indexed by the subset's bit pattern.
    fn table(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        check_table_dim(d)?;
        (0..1u64 << d).map(|s| self.value(Subset(s))).collect()
    }

    /// Values of the `d + 1` prefixes of `order`: `out[k] = val(order[..k])`.
    fn chain(&self, order: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(order.len() + 1);
        let mut u = Subset::EMPTY;
        out.push(self.value(u)?);
        for &j in order {
            u = u.with(j);
            out.push(self.value(u)?);
        }
        Ok(out)
    }
}

pub fn check_table_dim(d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidArgument("game has no players".into()));
    }
    if d > EXACT_CAP {
        return Err(Error::TooManyFeatures { d, cap: EXACT_CAP });
    }
    Ok(())
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidArgument("game has no players".into()));
    }
    if d > MAX_FEATURES {
        return Err(Error::InvalidArgument(format!(
            "at most {MAX_FEATURES} features are supported (got {d})"
        )));
    }
    Ok(())
}

/// Game given by an explicit `2^d` table with `table[0] == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGame {
    d: usize,
    values: Vec<f64>,
    info: GameInfo,
}

impl TableGame {
    pub fn new(d: usize, values: Vec<f64>) -> Result<Self> {
        check_table_dim(d)?;
        if values.len() != 1 << d {
            return Err(Error::IncompleteTable {
                expected: 1 << d,
                found: values.len(),
            });
        }
        if values[0] != 0.0 {
            return Err(Error::InvalidArgument("value of the empty coalition must be 0".into()));
        }
        Ok(TableGame {
            d,
            values,
            info: GameInfo {
                method: Method::Table,
                target: None,
            },
        })
    }

    pub fn from_fn(d: usize, f: impl Fn(Subset) -> f64) -> Result<Self> {
        check_table_dim(d)?;
        let values = (0..1u64 << d)
            .map(|s| if s == 0 { 0.0 } else { f(Subset(s)) })
            .collect();
        TableGame::new(d, values)
    }

    /// Tabulates any game.
    pub fn tabulate(game: &dyn Game) -> Result<Self> {
        let mut t = TableGame::new(game.dim(), game.table()?)?;
        t.info = game.info();
        Ok(t)
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &TableGame, beta: f64) -> Result<Self> {
        if self.d != other.d {
            return Err(Error::LengthMismatch {
                expected: self.d,
                found: other.d,
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        TableGame::new(self.d, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl Game for TableGame {
    fn dim(&self) -> usize {
        self.d
    }

    fn info(&self) -> GameInfo {
        self.info
    }

    fn value(&self, u: Subset) -> Result<f64> {
        Ok(self.values[u.index()])
    }

    fn table(&self) -> Result<Vec<f64>> {
        Ok(self.values.clone())
    }
}

/// Predictions prepared for cohort averaging.
#[derive(Debug, Clone)]
pub struct CohortData {
    summer: MaskedSummer,
    mean: f64,
}

impl CohortData {
    pub fn new(ds: &Dataset) -> Result<Self> {
        Ok(CohortData::from_predictions(ds.predictions()?))
    }

    pub fn from_predictions(y: &[f64]) -> Self {
        let summer = MaskedSummer::new(y);
        let mean = summer.sum(&Bitset::ones(y.len())) / y.len() as f64;
        CohortData { summer, mean }
    }

    pub fn n(&self) -> usize {
        self.summer.len()
    }

    /// `ybar`, computed the same way as a cohort mean over everyone.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn y(&self) -> &[f64] {
        self.summer.values()
    }

    #[inline]
    fn centered(&self, mask: &Bitset, count: usize, squared: bool) -> f64 {
        let v = self.summer.sum(mask) / count as f64 - self.mean;
        if squared {
            v * v
        } else {
            v
        }
    }
}

/// Cohort Shapley game `val(u) = ybar_{t,u} - ybar`, or its square.
#[derive(Debug, Clone)]
pub struct CohortGame<'a> {
    data: &'a CohortData,
    z: SimilarityMatrix,
    squared: bool,
}

impl<'a> CohortGame<'a> {
    pub fn new(data: &'a CohortData, z: SimilarityMatrix, squared: bool) -> Result<Self> {
        check_dim(z.d())?;
        if z.n() != data.n() {
            return Err(Error::LengthMismatch {
                expected: data.n(),
                found: z.n(),
            });
        }
        Ok(CohortGame { data, z, squared })
    }

    pub fn matrix(&self) -> &SimilarityMatrix {
        &self.z
    }

    fn walk(&self, u: u64, start: usize, depth: usize, masks: &mut [Bitset], out: &mut [f64]) {
        for j in start..self.z.d() {
            let (head, tail) = masks.split_at_mut(depth + 1);
            let count = tail[0].assign_and(&head[depth], self.z.column(j));
            let v = u | 1 << j;
            out[v as usize] = self.data.centered(&tail[0], count, self.squared);
            self.walk(v, j + 1, depth + 1, masks, out);
        }
    }
}

/// `val_CS(u) = ybar_{t,u} - ybar`.
pub fn make_cs_game(data: &CohortData, z: SimilarityMatrix) -> Result<CohortGame<'_>> {
    CohortGame::new(data, z, false)
}

/// `val_CS2(u) = (ybar_{t,u} - ybar)^2`.
pub fn make_cs2_game(data: &CohortData, z: SimilarityMatrix) -> Result<CohortGame<'_>> {
    CohortGame::new(data, z, true)
}

impl Game for CohortGame<'_> {
    fn dim(&self) -> usize {
        self.z.d()
    }

    fn info(&self) -> GameInfo {
        GameInfo {
            method: if self.squared { Method::Cs2 } else { Method::Cs },
            target: self.z.target(),
        }
    }

    fn value(&self, u: Subset) -> Result<f64> {
        if u.is_empty() {
            return Ok(0.0);
        }
        let mask = self.z.cohort(u);
        Ok(self.data.centered(&mask.bits, mask.count, self.squared))
    }

    /// Depth-first lattice walk: each child cohort is its parent ANDed with one column.
    fn table(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        check_table_dim(d)?;
        let mut out = vec![0.0; 1 << d];
        let mut masks = vec![Bitset::ones(self.z.n()); d + 1];
        self.walk(0, 0, 0, &mut masks, &mut out);
        Ok(out)
    }

    fn chain(&self, order: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(order.len() + 1);
        out.push(0.0);
        let mut mask = Bitset::ones(self.z.n());
        for &j in order {
            let count = mask.and_assign(self.z.column(j));
            out.push(self.data.centered(&mask, count, self.squared));
        }
        Ok(out)
    }
}

/// Targets handled per block when summing per-target tables; fixed so the
/// reduction order does not depend on the thread count.
const TARGET_BLOCK: usize = 32;

/// Variance game `val_var(u) = (1/n) sum_t (ybar_{t,u} - ybar)^2`.
#[derive(Debug, Clone)]
pub struct VarianceGame<'a> {
    ds: &'a Dataset,
    rules: &'a SimilarityRules,
    data: CohortData,
}

impl<'a> VarianceGame<'a> {
    pub fn new(ds: &'a Dataset, rules: &'a SimilarityRules) -> Result<Self> {
        check_dim(ds.d())?;
        if rules.d() != ds.d() {
            return Err(Error::LengthMismatch {
                expected: ds.d(),
                found: rules.d(),
            });
        }
        Ok(VarianceGame {
            ds,
            rules,
            data: CohortData::new(ds)?,
        })
    }

    fn reduce<F>(&self, width: usize, per_target: F) -> Result<Vec<f64>>
    where
        F: Fn(&CohortGame<'_>) -> Result<Vec<f64>> + Sync + Send,
    {
        let n = self.ds.n();
        let blocks = n.div_ceil(TARGET_BLOCK);
        let partial = par::try_map_range(blocks, |b| {
            let mut acc = vec![0.0; width];
            for t in b * TARGET_BLOCK..((b + 1) * TARGET_BLOCK).min(n) {
                let game = CohortGame::new(&self.data, self.rules.matrix(self.ds, t), true)?;
                for (a, v) in acc.iter_mut().zip(per_target(&game)?) {
                    *a += v;
                }
            }
            Ok::<_, Error>(acc)
        })?;
        let mut total = vec![0.0; width];
        for block in partial {
            for (a, v) in total.iter_mut().zip(block) {
                *a += v;
            }
        }
        Ok(total.into_iter().map(|v| v / n as f64).collect())
    }
}

/// See [`VarianceGame`].
pub fn make_var_game<'a>(ds: &'a Dataset, rules: &'a SimilarityRules) -> Result<VarianceGame<'a>> {
    VarianceGame::new(ds, rules)
}

impl Game for VarianceGame<'_> {
    fn dim(&self) -> usize {
        self.ds.d()
    }

    fn info(&self) -> GameInfo {
        GameInfo {
            method: Method::Var,
            target: None,
        }
    }

    fn value(&self, u: Subset) -> Result<f64> {
        if u.is_empty() {
            return Ok(0.0);
        }
        Ok(self.reduce(1, |g| Ok(vec![g.value(u)?]))?[0])
    }

    fn table(&self) -> Result<Vec<f64>> {
        check_table_dim(self.dim())?;
        let mut t = self.reduce(1 << self.dim(), |g| g.table())?;
        t[0] = 0.0;
        Ok(t)
    }

    fn chain(&self, order: &[usize]) -> Result<Vec<f64>> {
        let mut c = self.reduce(order.len() + 1, |g| g.chain(order))?;
        c[0] = 0.0;
        Ok(c)
    }
}

/// Hybrid point `x_{t,u} : x_{b,-u}`.
pub fn hybrid_point(target: &[f64], baseline: &[f64], u: Subset, out: &mut [f64]) {
    for (j, slot) in out.iter_mut().enumerate() {
        *slot = if u.contains(j) { target[j] } else { baseline[j] };
    }
}

/// Baseline Shapley game `val(u) = f(x_{t,u}:x_{b,-u}) - f(x_b)`, or its square.
#[derive(Debug, Clone)]
pub struct BaselineGame<'a> {
    model: &'a ModelAdapter,
    target: Vec<f64>,
    baseline: Vec<f64>,
    f_baseline: f64,
    squared: bool,
    target_index: Option<usize>,
}

impl<'a> BaselineGame<'a> {
    pub fn new(
        model: &'a ModelAdapter,
        target: Vec<f64>,
        baseline: Vec<f64>,
        squared: bool,
    ) -> Result<Self> {
        check_dim(target.len())?;
        if baseline.len() != target.len() {
            return Err(Error::LengthMismatch {
                expected: target.len(),
                found: baseline.len(),
            });
        }
        let f_baseline = model.predict_one(&baseline)?;
        Ok(BaselineGame {
            model,
            target,
            baseline,
            f_baseline,
            squared,
            target_index: None,
        })
    }

    pub fn with_target_index(mut self, t: usize) -> Self {
        self.target_index = Some(t);
        self
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn baseline(&self) -> &[f64] {
        &self.baseline
    }

    pub fn hybrid(&self, u: Subset) -> Vec<f64> {
        let mut p = vec![0.0; self.target.len()];
        hybrid_point(&self.target, &self.baseline, u, &mut p);
        p
    }

    #[inline]
    fn transform(&self, f: f64) -> f64 {
        let v = f - self.f_baseline;
        if self.squared {
            v * v
        } else {
            v
        }
    }

    fn evaluate_many(&self, subsets: &[Subset]) -> Result<Vec<f64>> {
        let d = self.target.len();
        let mut points = Points::with_capacity(d, subsets.len());
        let mut buf = vec![0.0; d];
        for &u in subsets {
            hybrid_point(&self.target, &self.baseline, u, &mut buf);
            points.push(&buf);
        }
        let f = self.model.predict(&points)?;
        Ok(subsets
            .iter()
            .zip(f)
            .map(|(u, f)| if u.is_empty() { 0.0 } else { self.transform(f) })
            .collect())
    }
}

/// `val_BS`.
pub fn make_bs_game<'a>(ds: &Dataset, t: usize, baseline: &[f64], model: &'a ModelAdapter) -> Result<BaselineGame<'a>> {
    Ok(BaselineGame::new(model, ds.row(t).to_vec(), baseline.to_vec(), false)?.with_target_index(t))
}

/// `val_BS2`: the per-coalition BS difference, squared.
pub fn make_bs2_game<'a>(ds: &Dataset, t: usize, baseline: &[f64], model: &'a ModelAdapter) -> Result<BaselineGame<'a>> {
    Ok(BaselineGame::new(model, ds.row(t).to_vec(), baseline.to_vec(), true)?.with_target_index(t))
}

impl Game for BaselineGame<'_> {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn info(&self) -> GameInfo {
        GameInfo {
            method: if self.squared { Method::Bs2 } else { Method::Bs },
            target: self.target_index,
        }
    }

    fn value(&self, u: Subset) -> Result<f64> {
        Ok(self.evaluate_many(&[u])?[0])
    }

    fn table(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        check_table_dim(d)?;
        let all: Vec<Subset> = (0..1u64 << d).map(Subset).collect();
        let mut out = Vec::with_capacity(all.len());
        for chunk in all.chunks(MAX_BATCH_POINTS) {
            out.extend(self.evaluate_many(chunk)?);
        }
        Ok(out)
    }

    fn chain(&self, order: &[usize]) -> Result<Vec<f64>> {
        let mut subsets = Vec::with_capacity(order.len() + 1);
        let mut u = Subset::EMPTY;
        subsets.push(u);
        for &j in order {
            u = u.with(j);
            subsets.push(u);
        }
        self.evaluate_many(&subsets)
    }
}

/// All-baseline Shapley: every row serves as a baseline,
/// `val(u) = (1/n) sum_i [f(x_{t,u}:x_{i,-u}) - f(x_i)]` (per-row differences
/// squared for the squared variant).
#[derive(Debug, Clone)]
pub struct AllBaselineGame<'a> {
    model: &'a ModelAdapter,
    ds: &'a Dataset,
    target: Vec<f64>,
    f_rows: std::borrow::Cow<'a, [f64]>,
    squared: bool,
    target_index: Option<usize>,
}

impl<'a> AllBaselineGame<'a> {
    pub fn new(model: &'a ModelAdapter, ds: &'a Dataset, t: usize, squared: bool) -> Result<Self> {
        let f_rows = model.predict_dataset(ds)?;
        Self::build(model, ds, t, squared, std::borrow::Cow::Owned(f_rows))
    }

    /// Reuses precomputed `f(x_i)` for every row.
    pub fn with_row_predictions(
        model: &'a ModelAdapter,
        ds: &'a Dataset,
        t: usize,
        squared: bool,
        f_rows: &'a [f64],
    ) -> Result<Self> {
        Self::build(model, ds, t, squared, std::borrow::Cow::Borrowed(f_rows))
    }

    fn build(
        model: &'a ModelAdapter,
        ds: &'a Dataset,
        t: usize,
        squared: bool,
        f_rows: std::borrow::Cow<'a, [f64]>,
    ) -> Result<Self> {
        check_dim(ds.d())?;
        if f_rows.len() != ds.n() {
            return Err(Error::LengthMismatch {
                expected: ds.n(),
                found: f_rows.len(),
            });
        }
        if t >= ds.n() {
            return Err(Error::InvalidArgument(format!("target {} out of range", t + 1)));
        }
        Ok(AllBaselineGame {
            model,
            ds,
            target: ds.row(t).to_vec(),
            f_rows,
            squared,
            target_index: Some(t),
        })
    }

    fn evaluate_many(&self, subsets: &[Subset]) -> Result<Vec<f64>> {
        let (n, d) = (self.ds.n(), self.ds.d());
        let mut points = Points::with_capacity(d, subsets.len() * n);
        let mut buf = vec![0.0; d];
        for &u in subsets {
            for i in 0..n {
                hybrid_point(&self.target, self.ds.row(i), u, &mut buf);
                points.push(&buf);
            }
        }
        let f = self.model.predict(&points)?;
        let mut diffs = vec![0.0; n];
        Ok(subsets
            .iter()
            .enumerate()
            .map(|(k, u)| {
                if u.is_empty() {
                    return 0.0;
                }
                for (i, slot) in diffs.iter_mut().enumerate() {
                    let v = f[k * n + i] - self.f_rows[i];
                    *slot = if self.squared { v * v } else { v };
                }
                par::pairwise_sum(&diffs) / n as f64
            })
            .collect())
    }

    fn batch(&self) -> usize {
        (MAX_BATCH_POINTS / self.ds.n()).max(1)
    }
}

/// `val_ABS`.
pub fn make_abs_game<'a>(ds: &'a Dataset, t: usize, model: &'a ModelAdapter) -> Result<AllBaselineGame<'a>> {
    AllBaselineGame::new(model, ds, t, false)
}

/// `val_ABS2`: per-baseline squared differences, averaged.
pub fn make_abs2_game<'a>(ds: &'a Dataset, t: usize, model: &'a ModelAdapter) -> Result<AllBaselineGame<'a>> {
    AllBaselineGame::new(model, ds, t, true)
}

impl Game for AllBaselineGame<'_> {
    fn dim(&self) -> usize {
        self.ds.d()
    }

    fn info(&self) -> GameInfo {
        GameInfo {
            method: if self.squared { Method::Abs2 } else { Method::Abs },
            target: self.target_index,
        }
    }

    fn value(&self, u: Subset) -> Result<f64> {
        Ok(self.evaluate_many(&[u])?[0])
    }

    fn table(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        check_table_dim(d)?;
        let all: Vec<Subset> = (0..1u64 << d).map(Subset).collect();
        let mut out = Vec::with_capacity(all.len());
        for chunk in all.chunks(self.batch()) {
            out.extend(self.evaluate_many(chunk)?);
        }
        Ok(out)
    }

    fn chain(&self, order: &[usize]) -> Result<Vec<f64>> {
        let mut subsets = Vec::with_capacity(order.len() + 1);
        let mut u = Subset::EMPTY;
        subsets.push(u);
        for &j in order {
            u = u.with(j);
            subsets.push(u);
        }
        let mut out = Vec::with_capacity(subsets.len());
        for chunk in subsets.chunks(self.batch()) {
            out.extend(self.evaluate_many(chunk)?);
        }
        Ok(out)
    }
}
