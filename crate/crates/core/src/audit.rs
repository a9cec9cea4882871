//! Realism of synthetic points.
//!
//! A point is realistic when some subject is similar to it on every feature,
//! with the point playing the role of the target. Marginal-product sampling
//! and baseline hybrids both create points that may have no such witness.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bitset::Bitset;
use crate::dataset::{holdout_indices, Dataset};
use crate::error::{Error, Result};
use crate::games::{check_table_dim, hybrid_point, BaselineGame, Method};
use crate::model::{ModelAdapter, Points};
use crate::par;
use crate::shapley::{exact_split, shapley_exact_partitioned, shapley_permutation_partitioned, Engine};
use crate::similarity::{ResolvedRule, SimilarityRule, SimilarityRules};
use crate::subset::Subset;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealismVerdict {
    pub point: Vec<f64>,
    pub realistic: bool,
    /// Lowest-index subject similar to the point on all features.
    pub witness: Option<usize>,
}

/// Scans all subjects by ANDing the per-feature similarity columns.
pub fn is_realistic(point: &[f64], ds: &Dataset, rules: &SimilarityRules) -> RealismVerdict {
    let z = rules.matrix_for_point(ds, point);
    let mut mask = Bitset::ones(ds.n());
    for j in 0..z.d() {
        if mask.and_assign(z.column(j)) == 0 {
            break;
        }
    }
    let witness = mask.first_set();
    RealismVerdict {
        point: point.to_vec(),
        realistic: witness.is_some(),
        witness,
    }
}

/// Per-column sorted values for answering many realism queries against one
/// dataset. Candidates come from the column whose similarity window holds the
/// fewest subjects and are then checked on the remaining columns.
#[derive(Debug, Clone)]
pub struct RealismIndex<'a> {
    ds: &'a Dataset,
    rules: Vec<ResolvedRule>,
    /// `(value, row)` sorted by value, one list per column.
    sorted: Vec<Vec<(f64, usize)>>,
}

impl<'a> RealismIndex<'a> {
    pub fn new(ds: &'a Dataset, rules: &SimilarityRules) -> Result<Self> {
        if rules.d() != ds.d() {
            return Err(Error::LengthMismatch {
                expected: ds.d(),
                found: rules.d(),
            });
        }
        let sorted = (0..ds.d())
            .map(|j| {
                let mut col: Vec<(f64, usize)> = (0..ds.n()).map(|i| (ds.value(i, j), i)).collect();
                col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                col
            })
            .collect();
        Ok(RealismIndex {
            ds,
            rules: rules.rules().to_vec(),
            sorted,
        })
    }

    /// Positions in `sorted[j]` of the subjects similar to `v` on column `j`.
    fn window(&self, j: usize, v: f64) -> std::ops::Range<usize> {
        let col = &self.sorted[j];
        let rule = self.rules[j];
        let (lo, hi) = rule.window(v);
        let mut a = col.partition_point(|p| p.0 < lo);
        let mut b = col.partition_point(|p| p.0 <= hi);
        // the window is computed in floating point; the set of similar values
        // is contiguous, so settle its edges with the rule itself
        while a > 0 && rule.similar(v, col[a - 1].0) {
            a -= 1;
        }
        while a < b && !rule.similar(v, col[a].0) {
            a += 1;
        }
        while b < col.len() && rule.similar(v, col[b].0) {
            b += 1;
        }
        while b > a && !rule.similar(v, col[b - 1].0) {
            b -= 1;
        }
        a..b
    }

    /// Same answer as [`is_realistic`]'s witness.
    pub fn witness(&self, point: &[f64]) -> Option<usize> {
        self.scan(point, false)
    }

    pub fn is_realistic(&self, point: &[f64]) -> bool {
        self.scan(point, true).is_some()
    }

    fn scan(&self, point: &[f64], any: bool) -> Option<usize> {
        let d = self.rules.len();
        let mut best: Option<(usize, std::ops::Range<usize>)> = None;
        for j in 0..d {
            let r = self.window(j, point[j]);
            if r.is_empty() {
                return None;
            }
            if best.as_ref().is_none_or(|(_, b)| r.len() < b.len()) {
                best = Some((j, r));
            }
        }
        let (k, range) = best?;
        let mut found: Option<usize> = None;
        for &(_, i) in &self.sorted[k][range] {
            if found.is_some_and(|f| f < i) {
                continue;
            }
            let row = self.ds.row(i);
            if (0..d).all(|j| j == k || self.rules[j].similar(point[j], row[j])) {
                if any {
                    return Some(i);
                }
                found = Some(i);
            }
        }
        found
    }

    /// Fraction of `points` that are realistic.
    pub fn rate(&self, points: &Points) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let hits = points.rows().filter(|p| self.is_realistic(p)).count();
        hits as f64 / points.len() as f64
    }
}

/// `m` points with coordinate `j` copied from an independently drawn row.
pub fn sample_marginal_product(ds: &Dataset, m: usize, seed: u64) -> Points {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_marginal_product(ds, m, &mut rng)
}

fn draw_marginal_product<R: Rng>(ds: &Dataset, m: usize, rng: &mut R) -> Points {
    let d = ds.d();
    let mut points = Points::with_capacity(d, m);
    let mut buf = vec![0.0; d];
    for _ in 0..m {
        for (j, slot) in buf.iter_mut().enumerate() {
            *slot = ds.value(rng.random_range(0..ds.n()), j);
        }
        points.push(&buf);
    }
    points
}

/// Rules at threshold scale `s`: range-fraction rules take fraction `s`,
/// all other rules are kept.
pub fn scaled_rules(base: &[SimilarityRule], s: f64) -> Vec<SimilarityRule> {
    base.iter().map(|r| r.with_range_fraction(s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealismSettings {
    pub thresholds: Vec<f64>,
    pub holdout_fractions: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    /// Marginal samples per run; `10 n` when `None`.
    pub samples: Option<usize>,
}

impl Default for RealismSettings {
    fn default() -> Self {
        RealismSettings {
            thresholds: (1..=20).map(|k| k as f64 * 0.05).collect(),
            holdout_fractions: vec![0.1, 0.2, 0.3],
            runs: 100,
            seed: 0,
            samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealismReport {
    pub thresholds: Vec<f64>,
    pub holdout_fractions: Vec<f64>,
    /// Mean over runs, one per threshold.
    pub marginal_rates: Vec<f64>,
    /// Mean over runs, `[threshold][fraction]`.
    pub holdout_rates: Vec<Vec<f64>>,
    pub runs: usize,
    pub seed: u64,
    pub samples_per_run: usize,
}

/// Realism rates of marginal-product samples (checked against the full data)
/// and of held-out rows (checked against the remaining rows), averaged over
/// runs. Within a run the same draws serve every threshold.
pub fn realism_curve(ds: &Dataset, base: &[SimilarityRule], settings: &RealismSettings) -> Result<RealismReport> {
    if settings.runs == 0 {
        return Err(Error::InvalidArgument("realism audit needs at least one run".into()));
    }
    if let Some(s) = settings.thresholds.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::InvalidArgument(format!("threshold scale {s} must be non-negative")));
    }
    let m = settings.samples.unwrap_or(10 * ds.n());
    let rules: Vec<SimilarityRules> = settings
        .thresholds
        .iter()
        .map(|&s| SimilarityRules::resolve(&scaled_rules(base, s), ds))
        .collect::<Result<_>>()?;
    let full: Vec<RealismIndex<'_>> = rules.iter().map(|r| RealismIndex::new(ds, r)).collect::<Result<_>>()?;
    // validate the splits before spending time on sampling
    for &f in &settings.holdout_fractions {
        holdout_indices(&mut ChaCha8Rng::seed_from_u64(0), ds.n(), f)?;
    }

    let per_run = par::try_map_range(settings.runs, |run| {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(run as u64);
        let samples = draw_marginal_product(ds, m, &mut rng);
        let marginal: Vec<f64> = full.iter().map(|idx| idx.rate(&samples)).collect();
        let mut holdout = vec![vec![0.0; settings.holdout_fractions.len()]; rules.len()];
        for (k, &f) in settings.holdout_fractions.iter().enumerate() {
            let (train_idx, test_idx) = holdout_indices(&mut rng, ds.n(), f)?;
            let train = ds.subset(&train_idx);
            let test = Points::from_flat(ds.d(), ds.subset(&test_idx).values().to_vec())?;
            for (s, r) in rules.iter().enumerate() {
                holdout[s][k] = RealismIndex::new(&train, r)?.rate(&test);
            }
        }
        Ok::<_, Error>((marginal, holdout))
    })?;

    let runs = settings.runs as f64;
    let mut marginal_rates = vec![0.0; rules.len()];
    let mut holdout_rates = vec![vec![0.0; settings.holdout_fractions.len()]; rules.len()];
    for (marginal, holdout) in &per_run {
        for s in 0..rules.len() {
            marginal_rates[s] += marginal[s];
            for (acc, v) in holdout_rates[s].iter_mut().zip(&holdout[s]) {
                *acc += v;
            }
        }
    }
    marginal_rates.iter_mut().for_each(|v| *v /= runs);
    holdout_rates.iter_mut().flatten().for_each(|v| *v /= runs);
    Ok(RealismReport {
        thresholds: settings.thresholds.clone(),
        holdout_fractions: settings.holdout_fractions.clone(),
        marginal_rates,
        holdout_rates,
        runs: settings.runs,
        seed: settings.seed,
        samples_per_run: m,
    })
}

impl RealismReport {
    /// CSV `threshold,source,fraction,rate`; the fraction is empty for marginal rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["threshold", "source", "fraction", "rate"])?;
        for (s, &threshold) in self.thresholds.iter().enumerate() {
            let th = threshold.to_string();
            w.write_record([th.as_str(), "marginal", "", &self.marginal_rates[s].to_string()])?;
            for (k, f) in self.holdout_fractions.iter().enumerate() {
                w.write_record([th.as_str(), "holdout", &f.to_string(), &self.holdout_rates[s][k].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Attribution split into increments between two realistic hybrids and the rest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitAttribution {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    pub phi: Vec<f64>,
    pub total: f64,
    pub phi_realistic: Vec<f64>,
    pub phi_unrealistic: Vec<f64>,
}

impl SplitAttribution {
    /// `sum_j |phi_unrealistic_j|` over the total absolute mass of both parts.
    pub fn unrealistic_share(&self) -> f64 {
        let u: f64 = self.phi_unrealistic.iter().map(|v| v.abs()).sum();
        let r: f64 = self.phi_realistic.iter().map(|v| v.abs()).sum();
        if u + r == 0.0 {
            0.0
        } else {
            u / (u + r)
        }
    }
}

/// Baseline Shapley for subject `t` with each increment `val(u+j) - val(u)`
/// counted as realistic only if both hybrids `x_{t,u}:x_{b,-u}` and
/// `x_{t,u+j}:x_{b,-(u+j)}` have a witness in `ds`.
pub fn bs_realism_split(
    ds: &Dataset,
    t: usize,
    baseline: &[f64],
    model: &ModelAdapter,
    rules: &SimilarityRules,
    engine: Engine,
) -> Result<SplitAttribution> {
    if t >= ds.n() {
        return Err(Error::InvalidArgument(format!("target {} out of range", t + 1)));
    }
    let index = RealismIndex::new(ds, rules)?;
    split_with_index(ds.row(t), baseline, model, &index, engine, Some(t))
}

fn split_with_index(
    target: &[f64],
    baseline: &[f64],
    model: &ModelAdapter,
    index: &RealismIndex<'_>,
    engine: Engine,
    t: Option<usize>,
) -> Result<SplitAttribution> {
    let mut game = BaselineGame::new(model, target.to_vec(), baseline.to_vec(), false)?;
    if let Some(t) = t {
        game = game.with_target_index(t);
    }
    let d = target.len();
    let realistic_hybrid = |u: Subset| {
        let mut p = vec![0.0; d];
        hybrid_point(target, baseline, u, &mut p);
        index.is_realistic(&p)
    };
    let (a, realistic, unrealistic) = match engine {
        Engine::Exact => {
            check_table_dim(d)?;
            let flags: Vec<bool> = (0..1u64 << d).map(|s| realistic_hybrid(Subset(s))).collect();
            shapley_exact_partitioned(&game, |u, j| flags[u.index()] && flags[u.with(j).index()])?
        }
        Engine::Permutation { permutations, seed } => {
            shapley_permutation_partitioned(&game, permutations, seed, |u, j| {
                realistic_hybrid(u) && realistic_hybrid(u.with(j))
            })?
        }
    };
    Ok(SplitAttribution {
        method: Method::Bs,
        target: t,
        phi: a.phi,
        total: a.total,
        phi_realistic: realistic,
        phi_unrealistic: unrealistic,
    })
}

/// All-baseline counterpart of [`bs_realism_split`]: the mean over baselines
/// `x_i` of the baseline splits.
pub fn abs_realism_split(
    ds: &Dataset,
    t: usize,
    model: &ModelAdapter,
    rules: &SimilarityRules,
    engine: Engine,
) -> Result<SplitAttribution> {
    if t >= ds.n() {
        return Err(Error::InvalidArgument(format!("target {} out of range", t + 1)));
    }
    let index = RealismIndex::new(ds, rules)?;
    let parts = par::try_map_range(ds.n(), |i| {
        split_with_index(ds.row(t), ds.row(i), model, &index, engine, Some(t))
    })?;
    let d = ds.d();
    let mean_of = |f: &dyn Fn(&SplitAttribution) -> &[f64]| -> Vec<f64> {
        let rows: Vec<Vec<f64>> = parts.iter().map(|p| f(p).to_vec()).collect();
        par::column_means(&rows, d)
    };
    let phi = mean_of(&|p| &p.phi);
    let (phi_realistic, phi_unrealistic) = phi
        .iter()
        .zip(mean_of(&|p| &p.phi_realistic))
        .map(|(&a, r)| exact_split(a, r))
        .unzip();
    let totals: Vec<f64> = parts.iter().map(|p| p.total).collect();
    Ok(SplitAttribution {
        method: Method::Abs,
        target: Some(t),
        phi,
        total: par::pairwise_sum(&totals) / ds.n() as f64,
        phi_realistic,
        phi_unrealistic,
    })
}
