//! Shapley engines and binary-cube decompositions.
//!
//! * [`shapley_exact`]: weighted sum over the full coalition lattice.
//! * [`shapley_permutation`]: permutation sampling with per-permutation seeds,
//!   so results do not depend on the worker count.
//! * [`anchored_cube`] / [`shapley_from_anchored`]: Möbius transform of a
//!   function on `{0,1}^d` (anchor `0`) and the Shapley value read off its
//!   components, `phi_j = sum_{u ∋ j} g_u(1) / |u|`.
//! * [`anova_cube`] / [`shapley_effects_independent`]: ANOVA under a product
//!   Bernoulli measure, and `phi_j = sum_{u ∋ j} sigma2_u / |u|`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::games::{check_table_dim, Game, Method, EXACT_CAP};
use crate::par;
use crate::subset::Subset;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attribution {
    pub phi: Vec<f64>,
    /// `val(1:d)`.
    pub total: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutations_used: Option<usize>,
}

impl Attribution {
    pub fn d(&self) -> usize {
        self.phi.len()
    }

    /// `sum_j phi_j - total`.
    pub fn efficiency_gap(&self) -> f64 {
        self.phi.iter().sum::<f64>() - self.total
    }
}

/// Which engine turns a game into an attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Exact,
    Permutation { permutations: usize, seed: u64 },
}

impl Engine {
    /// Default sample size: `max(1000, ceil(50 d ln d))`.
    pub fn default_permutations(d: usize) -> usize {
        let d = d as f64;
        ((50.0 * d * d.ln()).ceil() as usize).max(1000)
    }

    pub fn run(self, game: &dyn Game) -> Result<Attribution> {
        match self {
            Engine::Exact => shapley_exact(game),
            Engine::Permutation { permutations, seed } => shapley_permutation(game, permutations, seed),
        }
    }
}

/// `n choose k`, exact for `n <= 64`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// `w(k) = 1 / (d * C(d-1, k))` for `k = 0..d-1`: the weight of a marginal
/// increment `val(u+j) - val(u)` with `|u| = k`.
pub fn shapley_weight_table(d: usize) -> Result<Vec<f64>> {
    if d == 0 || d > EXACT_CAP {
        return Err(Error::InvalidArgument(format!(
            "weight table needs 1 <= d <= {EXACT_CAP} (got {d})"
        )));
    }
    Ok((0..d)
        .map(|k| 1.0 / (d as f64 * binomial(d - 1, k) as f64))
        .collect())
}

/// Both sides of `sum_{r=s-1}^{d-1} C(r, s-1) = C(d, s)`.
pub fn hockey_stick(d: usize, s: usize) -> (u128, u128) {
    assert!(s >= 1 && s <= d, "need 1 <= s <= d");
    let lhs = (s - 1..d).map(|r| binomial(r, s - 1)).sum();
    (lhs, binomial(d, s))
}

/// Exact Shapley values from the lattice table. Each coalition value is
/// evaluated once.
pub fn shapley_exact(game: &dyn Game) -> Result<Attribution> {
    let d = game.dim();
    check_table_dim(d)?;
    let values = game.table()?;
    let (phi, _) = accumulate_exact(d, &values, None::<fn(Subset, usize) -> bool>)?;
    let info = game.info();
    Ok(Attribution {
        phi,
        total: values[Subset::full(d).index()],
        method: info.method,
        target: info.target,
        stderr: None,
        permutations_used: None,
    })
}

/// Shapley values of the table game `values` (with `values[0] == 0`).
pub fn shapley_from_table(d: usize, values: &[f64]) -> Result<Vec<f64>> {
    check_table_dim(d)?;
    Ok(accumulate_exact(d, values, None::<fn(Subset, usize) -> bool>)?.0)
}

/// Sums `w(|u|) (val(u+j) - val(u))` into `phi[j]`, and additionally into a
/// second accumulator for increments that `select(u, j)` accepts.
fn accumulate_exact<F>(d: usize, values: &[f64], select: Option<F>) -> Result<(Vec<f64>, Option<Vec<f64>>)>
where
    F: Fn(Subset, usize) -> bool,
{
    if values.len() != 1 << d {
        return Err(Error::IncompleteTable {
            expected: 1 << d,
            found: values.len(),
        });
    }
    let w = shapley_weight_table(d)?;
    let mut phi = vec![0.0; d];
    let mut selected = select.as_ref().map(|_| vec![0.0; d]);
    for s in 0..1u64 << d {
        let u = Subset(s);
        if u.len() == d {
            continue;
        }
        let wu = w[u.len()];
        let base = values[s as usize];
        for (j, slot) in phi.iter_mut().enumerate() {
            if u.contains(j) {
                continue;
            }
            let term = wu * (values[u.with(j).index()] - base);
            *slot += term;
            if let (Some(f), Some(acc)) = (&select, selected.as_mut()) {
                if f(u, j) {
                    acc[j] += term;
                }
            }
        }
    }
    Ok((phi, selected))
}

/// Exact Shapley values with each increment `val(u+j) - val(u)` assigned to one
/// of two parts. Returns `(phi, selected, rest)` where `selected + rest == phi`
/// holds bit-exactly, `rest` being defined as the complement.
pub fn shapley_exact_partitioned<F>(game: &dyn Game, select: F) -> Result<(Attribution, Vec<f64>, Vec<f64>)>
where
    F: Fn(Subset, usize) -> bool,
{
    let d = game.dim();
    check_table_dim(d)?;
    let values = game.table()?;
    let (phi, selected) = accumulate_exact(d, &values, Some(select))?;
    let (selected, rest) = split_all(&phi, &selected.expect("selector given"));
    let info = game.info();
    let attribution = Attribution {
        phi,
        total: values[Subset::full(d).index()],
        method: info.method,
        target: info.target,
        stderr: None,
        permutations_used: None,
    };
    Ok((attribution, selected, rest))
}

/// Splits `total` into `(part', rest)` with `part' + rest == total` in
/// floating point, `part'` within a few ulps of `part` and `rest` the nudged
/// difference. Moving `part` is needed when every `part + rest` rounds to a
/// tie on either side of `total`. Falls back to `(part, total - part)` when
/// `|total|` is so far below `|part|` that no nearby pair closes.
pub fn exact_split(total: f64, part: f64) -> (f64, f64) {
    let mut candidates = vec![part];
    let (mut up, mut down) = (part, part);
    for _ in 0..8 {
        up = up.next_up();
        down = down.next_down();
        candidates.push(up);
        candidates.push(down);
    }
    for p in candidates {
        let mut r = total - p;
        for _ in 0..8 {
            let s = p + r;
            if s == total {
                return (p, r);
            }
            r = if s < total { r.next_up() } else { r.next_down() };
        }
    }
    (part, total - part)
}

fn split_all(total: &[f64], part: &[f64]) -> (Vec<f64>, Vec<f64>) {
    total.iter().zip(part).map(|(&t, &p)| exact_split(t, p)).unzip()
}

/// Permutations drawn per work item; a fixed block size keeps the reduction
/// order independent of the number of workers.
const PERMUTATION_BLOCK: usize = 64;

/// Running mean and sum of squared deviations per feature.
#[derive(Debug, Clone)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    selected: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Moments {
            count: 0.0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
            selected: vec![0.0; d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.count;
            *s += delta * (v - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        let total = self.count + other.count;
        for j in 0..self.mean.len() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * other.count / total;
            self.m2[j] += other.m2[j] + delta * delta * self.count * other.count / total;
            self.selected[j] += other.selected[j];
        }
        self.count = total;
    }
}

/// The `k`-th sampled permutation of `0..d` for `seed`.
pub fn sampled_permutation(d: usize, seed: u64, k: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng);
    order
}

fn permutation_engine<F>(game: &dyn Game, m: usize, seed: u64, select: Option<&F>) -> Result<(Attribution, Vec<f64>)>
where
    F: Fn(Subset, usize) -> bool + Sync,
{
    let d = game.dim();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 permutations (got {m})")));
    }
    let blocks = m.div_ceil(PERMUTATION_BLOCK);
    let partial = par::try_map_range(blocks, |b| {
        let mut acc = Moments::new(d);
        let mut inc = vec![0.0; d];
        for k in b * PERMUTATION_BLOCK..((b + 1) * PERMUTATION_BLOCK).min(m) {
            let order = sampled_permutation(d, seed, k as u64);
            let chain = game.chain(&order)?;
            let mut prefix = Subset::EMPTY;
            for (pos, &j) in order.iter().enumerate() {
                inc[j] = chain[pos + 1] - chain[pos];
                if let Some(f) = select {
                    if f(prefix, j) {
                        acc.selected[j] += inc[j];
                    }
                }
                prefix = prefix.with(j);
            }
            acc.push(&inc);
        }
        Ok::<_, Error>(acc)
    })?;
    let mut total = Moments::new(d);
    for p in &partial {
        total.merge(p);
    }
    let mf = m as f64;
    let stderr = total
        .m2
        .iter()
        .map(|s| (s / (mf - 1.0)).max(0.0).sqrt() / mf.sqrt())
        .collect();
    let info = game.info();
    let grand = game.chain(&(0..d).collect::<Vec<_>>())?[d];
    let selected = total.selected.iter().map(|s| s / mf).collect();
    Ok((
        Attribution {
            phi: total.mean,
            total: grand,
            method: info.method,
            target: info.target,
            stderr: Some(stderr),
            permutations_used: Some(m),
        },
        selected,
    ))
}

/// Monte Carlo Shapley values from `m` random permutations. Each permutation's
/// increments telescope to `val(1:d)`, so efficiency holds for every `m`.
pub fn shapley_permutation(game: &dyn Game, m: usize, seed: u64) -> Result<Attribution> {
    Ok(permutation_engine(game, m, seed, None::<&fn(Subset, usize) -> bool>)?.0)
}

/// Permutation engine with increments partitioned as in
/// [`shapley_exact_partitioned`].
pub fn shapley_permutation_partitioned<F>(
    game: &dyn Game,
    m: usize,
    seed: u64,
    select: F,
) -> Result<(Attribution, Vec<f64>, Vec<f64>)>
where
    F: Fn(Subset, usize) -> bool + Sync,
{
    let (a, selected) = permutation_engine(game, m, seed, Some(&select))?;
    let (selected, rest) = split_all(&a.phi, &selected);
    Ok((a, selected, rest))
}

/// `g(e_u)` for every `u ⊆ 1:d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeFunction {
    d: usize,
    values: Vec<f64>,
}

impl CubeFunction {
    pub fn new(d: usize, values: Vec<f64>) -> Result<Self> {
        check_table_dim(d)?;
        if values.len() != 1 << d {
            return Err(Error::IncompleteTable {
                expected: 1 << d,
                found: values.len(),
            });
        }
        Ok(CubeFunction { d, values })
    }

    pub fn from_fn(d: usize, f: impl Fn(Subset) -> f64) -> Result<Self> {
        check_table_dim(d)?;
        CubeFunction::new(d, (0..1u64 << d).map(|s| f(Subset(s))).collect())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, u: Subset) -> f64 {
        self.values[u.index()]
    }

    /// The game `val(u) = g(e_u) - g(0)`.
    pub fn as_game(&self) -> Result<crate::games::TableGame> {
        let g0 = self.values[0];
        crate::games::TableGame::new(self.d, self.values.iter().map(|v| v - g0).collect())
    }

    /// `g_{u,0}(e_w) = sum_{v ⊆ u} (-1)^{|u-v|} g(e_{v ∩ w})`, evaluated directly.
    pub fn anchored_component_at(&self, u: Subset, w: Subset) -> f64 {
        crate::subset::subsets_of(u)
            .map(|v| {
                let sign = if (u.len() - v.len()).is_multiple_of(2) { 1.0 } else { -1.0 };
                sign * self.at(Subset(v.0 & w.0))
            })
            .sum()
    }
}

/// Anchored decomposition with anchor `0`: `components[u] = g_{u,0}(1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeDecomposition {
    d: usize,
    components: Vec<f64>,
}

impl CubeDecomposition {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    /// `sum_{u ⊆ w} components[u]`, which equals `g(e_w)`.
    pub fn reconstruct(&self, w: Subset) -> f64 {
        crate::subset::subsets_of(w).map(|u| self.components[u.index()]).sum()
    }
}

/// Inclusion–exclusion over subsets, computed as a fast Möbius transform in
/// `d 2^(d-1)` subtractions.
pub fn anchored_cube(g: &CubeFunction) -> CubeDecomposition {
    let mut a = g.values.clone();
    for j in 0..g.d {
        let bit = 1usize << j;
        for s in 0..a.len() {
            if s & bit != 0 {
                a[s] -= a[s ^ bit];
            }
        }
    }
    CubeDecomposition {
        d: g.d,
        components: a,
    }
}

/// `phi_j = sum_{u ∋ j} components[u] / |u|`; total `g(1) - g(0)`.
pub fn shapley_from_anchored(dec: &CubeDecomposition) -> Attribution {
    let d = dec.d;
    let mut phi = vec![0.0; d];
    for (s, &c) in dec.components.iter().enumerate().skip(1) {
        let u = Subset(s as u64);
        let share = c / u.len() as f64;
        for j in u.iter() {
            phi[j] += share;
        }
    }
    let total = dec.components.iter().skip(1).sum();
    Attribution {
        phi,
        total,
        method: Method::Table,
        target: None,
        stderr: None,
        permutations_used: None,
    }
}

/// Functional ANOVA of a cube function under independent Bernoulli(`p_j`) coordinates.
///
/// Each effect is `g_u(z) = a_u prod_{j∈u} (z_j - p_j)`, so
/// `sigma2_u = a_u^2 prod_{j∈u} p_j (1 - p_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnovaDecomposition {
    d: usize,
    probabilities: Vec<f64>,
    coefficients: Vec<f64>,
    sigma2: Vec<f64>,
    mean: f64,
}

impl AnovaDecomposition {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn total_variance(&self) -> f64 {
        self.sigma2.iter().sum()
    }

    /// `g_u(z)`; for `u = {}` this is the mean.
    pub fn component_value(&self, u: Subset, z: Subset) -> f64 {
        u.iter().fold(self.coefficients[u.index()], |acc, j| {
            acc * (if z.contains(j) { 1.0 } else { 0.0 } - self.probabilities[j])
        })
    }
}

/// Tolerance for accepting corner weights as a product measure.
const PRODUCT_TOLERANCE: f64 = 1e-10;

/// ANOVA of `g` under corner `weights` (indexed like the cube), which must
/// factor into independent coordinates.
pub fn anova_cube(g: &CubeFunction, weights: &[f64]) -> Result<AnovaDecomposition> {
    let d = g.d;
    if weights.len() != 1 << d {
        return Err(Error::IncompleteTable {
            expected: 1 << d,
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument("corner weights must be non-negative".into()));
    }
    let mass: f64 = weights.iter().sum();
    if (mass - 1.0).abs() > PRODUCT_TOLERANCE {
        return Err(Error::InvalidArgument(format!("corner weights sum to {mass}, not 1")));
    }
    let p: Vec<f64> = (0..d)
        .map(|j| {
            weights
                .iter()
                .enumerate()
                .filter(|(s, _)| s >> j & 1 == 1)
                .map(|(_, w)| w)
                .sum()
        })
        .collect();
    let deviation = product_weights(&p)
        .iter()
        .zip(weights)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if deviation > PRODUCT_TOLERANCE {
        return Err(Error::NonProductWeights { deviation });
    }
    Ok(anova_with_probabilities(g, &p))
}

/// Corner weights of independent Bernoulli(`p_j`) coordinates.
pub fn product_weights(p: &[f64]) -> Vec<f64> {
    (0..1u64 << p.len())
        .map(|s| {
            p.iter()
                .enumerate()
                .map(|(j, &pj)| if s >> j & 1 == 1 { pj } else { 1.0 - pj })
                .product()
        })
        .collect()
}

/// ANOVA under independent Bernoulli(`p_j`) coordinates.
pub fn anova_with_probabilities(g: &CubeFunction, p: &[f64]) -> AnovaDecomposition {
    let d = g.d;
    assert_eq!(p.len(), d);
    // multilinear coefficients in z, then re-centred at p
    let mut a = anchored_cube(g).components;
    for (j, &pj) in p.iter().enumerate() {
        let bit = 1usize << j;
        for s in 0..a.len() {
            if s & bit == 0 {
                a[s] += pj * a[s | bit];
            }
        }
    }
    let sigma2: Vec<f64> = a
        .iter()
        .enumerate()
        .map(|(s, &c)| {
            if s == 0 {
                0.0
            } else {
                Subset(s as u64)
                    .iter()
                    .fold(c * c, |acc, j| acc * p[j] * (1.0 - p[j]))
            }
        })
        .collect();
    AnovaDecomposition {
        d,
        probabilities: p.to_vec(),
        mean: a[0],
        coefficients: a,
        sigma2,
    }
}

/// `phi_j = sum_{u ∋ j} sigma2_u / |u|`; total is the variance.
pub fn shapley_effects_independent(a: &AnovaDecomposition) -> Attribution {
    let mut phi = vec![0.0; a.d];
    for (s, &v) in a.sigma2.iter().enumerate().skip(1) {
        let u = Subset(s as u64);
        let share = v / u.len() as f64;
        for j in u.iter() {
            phi[j] += share;
        }
    }
    Attribution {
        phi,
        total: a.total_variance(),
        method: Method::Var,
        target: None,
        stderr: None,
        permutations_used: None,
    }
}
