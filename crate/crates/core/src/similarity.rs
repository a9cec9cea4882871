//! Per-feature similarity to a target and cohort bitmasks.
//!
//! For target `t` and feature `j`, `z_tj(x_ij)` says whether subject `i` counts
//! as similar to `t` on feature `j`. A [`SimilarityMatrix`] stores one bitset
//! per feature; the cohort of a feature set `u` is the AND of its columns.

use serde::{Deserialize, Serialize};

use crate::bitset::{Bitset, MaskedSummer};
use crate::dataset::{ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::subset::Subset;

fn one() -> f64 {
    1.0
}

/// Similarity rule for one column, as written in the JSON config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimilarityRule {
    Identity,
    /// `|x_ij - x_tj| <= delta`.
    #[serde(rename = "abs")]
    AbsoluteThreshold { delta: f64 },
    /// Absolute threshold with `delta = frac * (quantile(hi_q) - quantile(lo_q))`.
    RangeFraction {
        frac: f64,
        #[serde(default)]
        lo_q: f64,
        #[serde(default = "one")]
        hi_q: f64,
    },
    /// `|x_ij - x_tj| <= delta * |x_tj|`; not symmetric in `i` and `t`.
    #[serde(rename = "relative")]
    RelativeThreshold { delta: f64 },
}

impl SimilarityRule {
    /// Min-max range fraction.
    pub fn range(frac: f64) -> Self {
        SimilarityRule::RangeFraction {
            frac,
            lo_q: 0.0,
            hi_q: 1.0,
        }
    }

    /// Fraction of the 5%..95% quantile window.
    pub fn trimmed_range(frac: f64) -> Self {
        SimilarityRule::RangeFraction {
            frac,
            lo_q: 0.05,
            hi_q: 0.95,
        }
    }

    /// Replaces the fraction of a `RangeFraction` rule; other rules are unchanged.
    pub fn with_range_fraction(self, frac: f64) -> Self {
        match self {
            SimilarityRule::RangeFraction { lo_q, hi_q, .. } => {
                SimilarityRule::RangeFraction { frac, lo_q, hi_q }
            }
            other => other,
        }
    }
}

/// A rule with quantiles already evaluated on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResolvedRule {
    Identity,
    Absolute(f64),
    Relative(f64),
}

impl ResolvedRule {
    #[inline]
    pub fn similar(self, target: f64, x: f64) -> bool {
        match self {
            ResolvedRule::Identity => x == target,
            ResolvedRule::Absolute(delta) => (x - target).abs() <= delta,
            ResolvedRule::Relative(delta) => (x - target).abs() <= delta * target.abs(),
        }
    }

    /// Closed interval of values similar to `target`.
    #[inline]
    pub fn window(self, target: f64) -> (f64, f64) {
        let half = match self {
            ResolvedRule::Identity => 0.0,
            ResolvedRule::Absolute(delta) => delta,
            ResolvedRule::Relative(delta) => delta * target.abs(),
        };
        (target - half, target + half)
    }
}

/// One resolved rule per column of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRules {
    rules: Vec<ResolvedRule>,
}

impl SimilarityRules {
    pub fn resolve(rules: &[SimilarityRule], ds: &Dataset) -> Result<Self> {
        if rules.len() != ds.d() {
            return Err(Error::LengthMismatch {
                expected: ds.d(),
                found: rules.len(),
            });
        }
        let resolved = rules
            .iter()
            .zip(ds.schema())
            .enumerate()
            .map(|(j, (rule, col))| {
                let invalid = |reason: &str| Error::InvalidRule {
                    column: col.name.clone(),
                    reason: reason.to_string(),
                };
                let categorical = col.kind == ColumnKind::Categorical;
                match *rule {
                    SimilarityRule::Identity => Ok(ResolvedRule::Identity),
                    _ if categorical => Err(invalid("categorical columns only support identity")),
                    SimilarityRule::AbsoluteThreshold { delta } => {
                        check_delta(delta).map_err(invalid)?;
                        Ok(ResolvedRule::Absolute(delta))
                    }
                    SimilarityRule::RelativeThreshold { delta } => {
                        check_delta(delta).map_err(invalid)?;
                        Ok(ResolvedRule::Relative(delta))
                    }
                    SimilarityRule::RangeFraction { frac, lo_q, hi_q } => {
                        check_delta(frac).map_err(invalid)?;
                        if !(0.0..=1.0).contains(&lo_q) || !(0.0..=1.0).contains(&hi_q) || lo_q >= hi_q {
                            return Err(invalid("range quantiles need 0 <= lo_q < hi_q <= 1"));
                        }
                        let width = ds.quantile(j, hi_q)? - ds.quantile(j, lo_q)?;
                        Ok(ResolvedRule::Absolute(frac * width))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SimilarityRules { rules: resolved })
    }

    pub fn from_resolved(rules: Vec<ResolvedRule>) -> Self {
        SimilarityRules { rules }
    }

    pub fn identity(d: usize) -> Self {
        SimilarityRules {
            rules: vec![ResolvedRule::Identity; d],
        }
    }

    pub fn rules(&self) -> &[ResolvedRule] {
        &self.rules
    }

    pub fn d(&self) -> usize {
        self.rules.len()
    }

    /// Similarity columns of every subject against subject `t`.
    pub fn matrix(&self, ds: &Dataset, t: usize) -> SimilarityMatrix {
        let mut m = self.matrix_for_point(ds, ds.row(t));
        m.target = Some(t);
        m
    }

    /// Similarity columns of every subject against an arbitrary point.
    pub fn matrix_for_point(&self, ds: &Dataset, point: &[f64]) -> SimilarityMatrix {
        debug_assert_eq!(point.len(), self.rules.len());
        let n = ds.n();
        let columns = self
            .rules
            .iter()
            .enumerate()
            .map(|(j, rule)| Bitset::from_fn(n, |i| rule.similar(point[j], ds.value(i, j))))
            .collect();
        SimilarityMatrix {
            target: None,
            n,
            columns,
        }
    }
}

fn check_delta(delta: f64) -> std::result::Result<(), &'static str> {
    if delta.is_finite() && delta >= 0.0 {
        Ok(())
    } else {
        Err("threshold must be finite and non-negative")
    }
}

/// Builds the similarity matrix for subject `t` from raw rules.
pub fn similarity_row(rules: &[SimilarityRule], ds: &Dataset, t: usize) -> Result<SimilarityMatrix> {
    if t >= ds.n() {
        return Err(Error::InvalidArgument(format!(
            "target {} outside 1..={}",
            t + 1,
            ds.n()
        )));
    }
    Ok(SimilarityRules::resolve(rules, ds)?.matrix(ds, t))
}

/// `n x d` binary matrix `z_tj(x_ij)`, stored column-wise as bitsets.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    target: Option<usize>,
    n: usize,
    columns: Vec<Bitset>,
}

impl SimilarityMatrix {
    pub fn from_columns(target: Option<usize>, columns: Vec<Bitset>) -> Self {
        let n = columns.first().map_or(0, Bitset::len);
        SimilarityMatrix { target, n, columns }
    }

    pub fn target(&self) -> Option<usize> {
        self.target
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &Bitset {
        &self.columns[j]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.columns[j].get(i)
    }

    /// `C_{t,u}`: AND of the columns in `u`; all subjects for `u = {}`.
    pub fn cohort(&self, u: Subset) -> CohortMask {
        let mut bits = Bitset::ones(self.n);
        let mut count = self.n;
        for j in u.iter() {
            count = bits.and_assign(&self.columns[j]);
        }
        CohortMask { bits, count }
    }

    /// `C_{t,u+j}` from `C_{t,u}`.
    pub fn refine(&self, mask: &CohortMask, j: usize) -> CohortMask {
        let mut bits = mask.bits.clone();
        let count = bits.and_assign(&self.columns[j]);
        CohortMask { bits, count }
    }
}

/// Cohort membership with its cardinality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortMask {
    pub bits: Bitset,
    pub count: usize,
}

impl CohortMask {
    pub fn all(n: usize) -> Self {
        CohortMask {
            bits: Bitset::ones(n),
            count: n,
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits.get(i)
    }

    pub fn members(&self) -> Vec<usize> {
        self.bits.iter_ones().collect()
    }
}

/// See [`SimilarityMatrix::cohort`].
pub fn cohort_mask(z: &SimilarityMatrix, u: Subset) -> CohortMask {
    z.cohort(u)
}

/// Mean of `y` over the cohort.
pub fn cohort_mean(mask: &CohortMask, y: &[f64]) -> f64 {
    debug_assert!(mask.count >= 1);
    mask.bits.iter_ones().map(|i| y[i]).sum::<f64>() / mask.count as f64
}

/// Cohort mean through a [`MaskedSummer`], used on hot paths.
#[inline]
pub fn cohort_mean_with(mask: &Bitset, count: usize, summer: &MaskedSummer) -> f64 {
    summer.sum(mask) / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ColumnSchema;
    use crate::testing::t8;
    use proptest::prelude::*;

    #[test]
    fn t8_cohort_sizes() {
        let ds = t8();
        let z = similarity_row(&[SimilarityRule::Identity; 3], &ds, 7).unwrap();
        assert_eq!(z.target(), Some(7));
        assert_eq!(z.cohort(Subset::EMPTY).count, 8);
        assert_eq!(z.cohort(Subset::from_features([0])).count, 4);
        assert_eq!(z.cohort(Subset::from_features([0, 1])).count, 2);
        assert_eq!(z.cohort(Subset::from_features([0, 1, 2])).members(), vec![7]);
        assert_eq!(
            z.cohort(Subset::from_features([0])).members(),
            vec![4, 5, 6, 7]
        );
    }

    #[test]
    fn t8_cohort_means() {
        let ds = t8();
        let y = ds.predictions().unwrap();
        let z = similarity_row(&[SimilarityRule::Identity; 3], &ds, 7).unwrap();
        assert_eq!(cohort_mean(&z.cohort(Subset::from_features([0])), y), 2.5);
        assert_eq!(cohort_mean(&z.cohort(Subset::EMPTY), y), 1.5);
        assert_eq!(cohort_mean(&z.cohort(Subset::full(3)), y), y[7]);
    }

    #[test]
    fn zero_threshold_is_identity() {
        let ds = crate::testing::random_dataset(60, 3, 11);
        let id = SimilarityRules::resolve(&[SimilarityRule::Identity; 3], &ds).unwrap();
        let abs = SimilarityRules::resolve(&[SimilarityRule::AbsoluteThreshold { delta: 0.0 }; 3], &ds).unwrap();
        for t in 0..ds.n() {
            assert_eq!(id.matrix(&ds, t), abs.matrix(&ds, t));
        }
    }

    #[test]
    fn range_fraction_resolves_to_quantile_width() {
        let schema = vec![ColumnSchema::new("a", ColumnKind::Numeric)];
        let ds = Dataset::from_rows(schema, (0..=100).map(|v| vec![v as f64]).collect()).unwrap();
        let r = SimilarityRules::resolve(&[SimilarityRule::range(0.1)], &ds).unwrap();
        assert_eq!(r.rules()[0], ResolvedRule::Absolute(10.0));
        let r = SimilarityRules::resolve(&[SimilarityRule::trimmed_range(0.1)], &ds).unwrap();
        match r.rules()[0] {
            ResolvedRule::Absolute(d) => assert!((d - 9.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rule_validation() {
        let schema = vec![
            ColumnSchema::new("c", ColumnKind::Categorical),
            ColumnSchema::new("x", ColumnKind::Numeric),
        ];
        let ds = Dataset::from_rows(schema, vec![vec![0.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let bad_cat = [SimilarityRule::RelativeThreshold { delta: 0.1 }, SimilarityRule::Identity];
        assert!(matches!(SimilarityRules::resolve(&bad_cat, &ds), Err(Error::InvalidRule { .. })));
        let neg = [SimilarityRule::Identity, SimilarityRule::AbsoluteThreshold { delta: -1.0 }];
        assert!(SimilarityRules::resolve(&neg, &ds).is_err());
        let bad_q = [
            SimilarityRule::Identity,
            SimilarityRule::RangeFraction { frac: 0.1, lo_q: 0.9, hi_q: 0.1 },
        ];
        assert!(SimilarityRules::resolve(&bad_q, &ds).is_err());
        assert!(SimilarityRules::resolve(&[SimilarityRule::Identity], &ds).is_err());
    }

    #[test]
    fn relative_threshold_is_not_symmetric() {
        let schema = vec![ColumnSchema::new("x", ColumnKind::Numeric)];
        let ds = Dataset::from_rows(schema, vec![vec![10.0], vec![12.0]]).unwrap();
        let rules = [SimilarityRule::RelativeThreshold { delta: 0.18 }];
        // |12 - 10| = 2 <= 0.18 * 12 but > 0.18 * 10
        assert!(!similarity_row(&rules, &ds, 0).unwrap().get(1, 0));
        assert!(similarity_row(&rules, &ds, 1).unwrap().get(0, 0));
    }

    #[test]
    fn rules_json() {
        let rules: Vec<SimilarityRule> = serde_json::from_str(
            r#"[{"kind":"identity"},{"kind":"abs","delta":0.5},
                {"kind":"range_fraction","frac":0.1},{"kind":"relative","delta":0.2},
                {"kind":"range_fraction","frac":0.1,"lo_q":0.05,"hi_q":0.95}]"#,
        )
        .unwrap();
        assert_eq!(rules[1], SimilarityRule::AbsoluteThreshold { delta: 0.5 });
        assert_eq!(rules[2], SimilarityRule::range(0.1));
        assert_eq!(rules[4], SimilarityRule::trimmed_range(0.1));
    }

    fn arb_rules(d: usize) -> impl Strategy<Value = Vec<SimilarityRule>> {
        proptest::collection::vec(
            prop_oneof![
                Just(SimilarityRule::Identity),
                (0.0f64..0.6).prop_map(SimilarityRule::range),
                (0.0f64..1.0).prop_map(|delta| SimilarityRule::AbsoluteThreshold { delta }),
                (0.0f64..0.5).prop_map(|delta| SimilarityRule::RelativeThreshold { delta }),
            ],
            d,
        )
    }

    proptest! {
        #[test]
        fn cohort_properties(seed in any::<u64>(), rules in arb_rules(4), t in 0usize..40, u in 0u64..16, v in 0u64..16) {
            let ds = crate::testing::random_dataset(40, 4, seed);
            let z = similarity_row(&rules, &ds, t).unwrap();
            // naive per-row oracle
            for s in [u, v] {
                let mask = z.cohort(Subset(s));
                for i in 0..ds.n() {
                    let naive = Subset(s).iter().all(|j| rules_similar(&rules, &ds, t, i, j));
                    prop_assert_eq!(mask.contains(i), naive);
                }
                prop_assert!(mask.contains(t));
                prop_assert_eq!(mask.count, mask.bits.count());
            }
            let (small, big) = (Subset(u & v), Subset(u | v));
            prop_assert!(z.cohort(big).bits.is_subset_of(&z.cohort(small).bits));
            for j in 0..4 {
                prop_assert_eq!(z.refine(&z.cohort(Subset(u)), j), z.cohort(Subset(u).with(j)));
            }
        }

        #[test]
        fn duplicated_columns_swap_invariance(seed in any::<u64>(), t in 0usize..30) {
            let base = crate::testing::random_dataset(30, 3, seed);
            // columns 1 and 2 identical
            let rows: Vec<Vec<f64>> = (0..base.n()).map(|i| {
                let r = base.row(i);
                vec![r[0], r[1], r[1]]
            }).collect();
            let ds = Dataset::from_rows(base.schema().to_vec(), rows).unwrap();
            let rules = [SimilarityRule::Identity, SimilarityRule::range(0.2), SimilarityRule::range(0.2)];
            let z = similarity_row(&rules, &ds, t).unwrap();
            for u in 0u64..8 {
                let swapped = Subset::from_features(Subset(u).iter().map(|j| match j { 1 => 2, 2 => 1, x => x }));
                prop_assert_eq!(z.cohort(Subset(u)), z.cohort(swapped));
            }
        }
    }

    fn rules_similar(rules: &[SimilarityRule], ds: &Dataset, t: usize, i: usize, j: usize) -> bool {
        let (xt, xi) = (ds.value(t, j), ds.value(i, j));
        match rules[j] {
            SimilarityRule::Identity => xi == xt,
            SimilarityRule::AbsoluteThreshold { delta } => (xi - xt).abs() <= delta,
            SimilarityRule::RelativeThreshold { delta } => (xi - xt).abs() <= delta * xt.abs(),
            SimilarityRule::RangeFraction { frac, lo_q, hi_q } => {
                let w = ds.quantile(j, hi_q).unwrap() - ds.quantile(j, lo_q).unwrap();
                (xi - xt).abs() <= frac * w
            }
        }
    }
}
