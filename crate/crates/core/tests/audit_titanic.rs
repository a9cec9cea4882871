mod common;

use cohort_shapley::audit::{abs_realism_split, bs_realism_split, RealismIndex};
use cohort_shapley::games::hybrid_point;
use cohort_shapley::shapley::Engine;
use cohort_shapley::similarity::{SimilarityRule, SimilarityRules};
use cohort_shapley::subset::{subsets_of, Subset};

fn rules(frac: f64) -> Vec<SimilarityRule> {
    let id = SimilarityRule::Identity;
    vec![id, id, SimilarityRule::range(frac), id, id, SimilarityRule::range(frac)]
}

#[test]
fn mean_baseline_leans_on_unrealistic_points_more_than_observed_baselines() {
    let (ds, model) = common::titanic_with_model();
    let rules = SimilarityRules::resolve(&rules(0.2), &ds).unwrap();
    let mean = ds.column_means();
    let bs = bs_realism_split(&ds, 0, &mean, &model, &rules, Engine::Exact).unwrap();
    let abs = abs_realism_split(&ds, 0, &model, &rules, Engine::Exact).unwrap();
    assert!(
        bs.unrealistic_share() > abs.unrealistic_share(),
        "bs {} vs abs {}",
        bs.unrealistic_share(),
        abs.unrealistic_share()
    );
    for s in [&bs, &abs] {
        for j in 0..ds.d() {
            assert_eq!(s.phi_realistic[j] + s.phi_unrealistic[j], s.phi[j]);
        }
    }
}

#[test]
fn mean_passenger_is_not_observed() {
    let (ds, _) = common::titanic_with_model();
    let rules = SimilarityRules::resolve(&rules(0.2), &ds).unwrap();
    let index = RealismIndex::new(&ds, &rules).unwrap();
    let mean = ds.column_means();
    assert!(!index.is_realistic(&mean));
    // a subject mixed with itself is the subject
    let mut out = vec![0.0; ds.d()];
    for u in subsets_of(Subset::full(ds.d())) {
        hybrid_point(ds.row(0), ds.row(0), u, &mut out);
        assert_eq!(index.witness(&out), index.witness(ds.row(0)));
    }
}
