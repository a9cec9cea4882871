//! Global importance and per-subject sweeps.
//!
//! Variance Shapley averages squared cohort games over targets, so its
//! attribution is also the target-average of the squared cohort attributions.
//! [`aggregate_squared_cs`] computes that average directly; the two agree up
//! to rounding.

use std::io::Write;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::games::{
    make_var_game, AllBaselineGame, BaselineGame, CohortData, CohortGame, Method,
};
use crate::model::ModelAdapter;
use crate::par;
use crate::shapley::{Attribution, Engine};
use crate::similarity::SimilarityRules;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAttribution {
    pub method: Method,
    pub phi_var: Vec<f64>,
    pub total_variance: f64,
    /// Row `t` holds the squared-CS attribution of subject `t`.
    pub per_subject: Option<Vec<Vec<f64>>>,
    pub stderr: Option<Vec<f64>>,
    pub permutations_used: Option<usize>,
}

/// Variance Shapley from the variance game.
pub fn variance_shapley(ds: &Dataset, rules: &SimilarityRules, engine: Engine) -> Result<GlobalAttribution> {
    let game = make_var_game(ds, rules)?;
    let a = engine.run(&game)?;
    Ok(GlobalAttribution {
        method: Method::Var,
        phi_var: a.phi,
        total_variance: a.total,
        per_subject: None,
        stderr: a.stderr,
        permutations_used: a.permutations_used,
    })
}

/// Column means of the per-target squared-CS attributions. Under the
/// permutation engine every target sees the same permutations.
pub fn aggregate_squared_cs(
    ds: &Dataset,
    rules: &SimilarityRules,
    engine: Engine,
    keep_per_subject: bool,
) -> Result<GlobalAttribution> {
    let targets: Vec<usize> = (0..ds.n()).collect();
    let per = cohort_attributions(ds, rules, &targets, true, engine)?;
    let rows: Vec<Vec<f64>> = per.iter().map(|a| a.phi.clone()).collect();
    let totals: Vec<f64> = per.iter().map(|a| a.total).collect();
    Ok(GlobalAttribution {
        method: Method::Cs2,
        phi_var: par::column_means(&rows, ds.d()),
        total_variance: par::pairwise_sum(&totals) / ds.n() as f64,
        per_subject: keep_per_subject.then_some(rows),
        stderr: None,
        permutations_used: per.first().and_then(|a| a.permutations_used),
    })
}

/// `max_j |direct_j - aggregated_j|`.
pub fn disaggregation_residual(direct: &GlobalAttribution, aggregated: &GlobalAttribution) -> f64 {
    direct
        .phi_var
        .iter()
        .zip(&aggregated.phi_var)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// CS or CS² attributions for the given targets (0-based).
pub fn cohort_attributions(
    ds: &Dataset,
    rules: &SimilarityRules,
    targets: &[usize],
    squared: bool,
    engine: Engine,
) -> Result<Vec<Attribution>> {
    check_targets(ds, targets)?;
    if rules.d() != ds.d() {
        return Err(Error::LengthMismatch {
            expected: ds.d(),
            found: rules.d(),
        });
    }
    let data = CohortData::new(ds)?;
    par::try_map_range(targets.len(), |k| {
        let game = CohortGame::new(&data, rules.matrix(ds, targets[k]), squared)?;
        engine.run(&game)
    })
}

/// Model-based attributions (BS, BS², ABS, ABS²) for the given targets.
/// `baseline` is required for the BS family and ignored otherwise.
pub fn model_attributions(
    ds: &Dataset,
    model: &ModelAdapter,
    method: Method,
    targets: &[usize],
    baseline: Option<&[f64]>,
    engine: Engine,
) -> Result<Vec<Attribution>> {
    check_targets(ds, targets)?;
    match method {
        Method::Bs | Method::Bs2 => {
            let baseline = baseline
                .ok_or_else(|| Error::InvalidArgument(format!("method {method} needs a baseline")))?;
            par::try_map_range(targets.len(), |k| {
                let t = targets[k];
                let game = BaselineGame::new(model, ds.row(t).to_vec(), baseline.to_vec(), method == Method::Bs2)?
                    .with_target_index(t);
                engine.run(&game)
            })
        }
        Method::Abs | Method::Abs2 => {
            let f_rows = model.predict_dataset(ds)?;
            par::try_map_range(targets.len(), |k| {
                let game = AllBaselineGame::with_row_predictions(model, ds, targets[k], method == Method::Abs2, &f_rows)?;
                engine.run(&game)
            })
        }
        other => Err(Error::InvalidArgument(format!("method {other} is not model based"))),
    }
}

fn check_targets(ds: &Dataset, targets: &[usize]) -> Result<()> {
    match targets.iter().find(|&&t| t >= ds.n()) {
        Some(t) => Err(Error::InvalidArgument(format!(
            "target {} out of range 1..={}",
            t + 1,
            ds.n()
        ))),
        None => Ok(()),
    }
}

/// Per-feature mean of unsquared attributions over subjects; near zero for CS
/// when cohorts tile the data.
pub fn mean_attribution(attributions: &[Attribution]) -> Vec<f64> {
    let d = attributions.first().map_or(0, |a| a.d());
    let rows: Vec<Vec<f64>> = attributions.iter().map(|a| a.phi.clone()).collect();
    par::column_means(&rows, d)
}

/// Stacked per-subject attributions, ordered by prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub names: Vec<String>,
    /// Subject indices (0-based) in display order.
    pub ordering: Vec<usize>,
    /// `bars[k]` belongs to subject `ordering[k]`.
    pub bars: Vec<Vec<f64>>,
    /// `f(x_t) - ybar`, aligned with `ordering`.
    pub overlay: Vec<f64>,
}

/// Builds a panel from one attribution per subject (indexed by subject) and
/// the predictions used for ordering; ties keep subject order.
pub fn export_panel(ds: &Dataset, attributions: &[Attribution], predictions: &[f64]) -> Result<Panel> {
    if attributions.len() != ds.n() || predictions.len() != ds.n() {
        return Err(Error::LengthMismatch {
            expected: ds.n(),
            found: attributions.len().min(predictions.len()),
        });
    }
    let ybar = par::pairwise_sum(predictions) / ds.n() as f64;
    let mut ordering: Vec<usize> = (0..ds.n()).collect();
    ordering.sort_by(|&a, &b| predictions[a].total_cmp(&predictions[b]));
    Ok(Panel {
        names: ds.names(),
        bars: ordering.iter().map(|&t| attributions[t].phi.clone()).collect(),
        overlay: ordering.iter().map(|&t| predictions[t] - ybar).collect(),
        ordering,
    })
}

impl Panel {
    /// CSV with header `rank,subject,<features>,overlay`; rank and subject are 1-based.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["rank".to_string(), "subject".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("overlay".into());
        w.write_record(&header)?;
        for (k, (&t, bars)) in self.ordering.iter().zip(&self.bars).enumerate() {
            let mut rec = vec![(k + 1).to_string(), (t + 1).to_string()];
            rec.extend(bars.iter().map(|v| v.to_string()));
            rec.push(self.overlay[k].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{random_dataset, t8};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn t8_global() {
        let ds = t8();
        let rules = SimilarityRules::identity(3);
        let v = variance_shapley(&ds, &rules, Engine::Exact).unwrap();
        assert!(close(&v.phi_var, &[1.0, 0.25, 0.0], 1e-12));
        assert!((v.total_variance - 1.25).abs() < 1e-12);
        let a = aggregate_squared_cs(&ds, &rules, Engine::Exact, true).unwrap();
        assert!(close(&a.phi_var, &[1.0, 0.25, 0.0], 1e-12));
        assert!(close(&a.per_subject.as_ref().unwrap()[7], &[1.5, 0.75, 0.0], 1e-12));
        assert!(disaggregation_residual(&v, &a) < 1e-12);
    }

    #[test]
    fn constant_predictions_give_zero() {
        let ds = t8().attach_predictions(vec![3.0; 8]).unwrap();
        let v = variance_shapley(&ds, &SimilarityRules::identity(3), Engine::Exact).unwrap();
        assert_eq!(v.phi_var, vec![0.0; 3]);
    }

    #[test]
    fn single_subject() {
        let ds = t8().subset(&[5]);
        let a = aggregate_squared_cs(&ds, &SimilarityRules::identity(3), Engine::Exact, true).unwrap();
        assert_eq!(a.per_subject.unwrap()[0], vec![0.0; 3]);
    }

    #[test]
    fn disaggregation_under_permutations() {
        let ds = random_dataset(120, 5, 3);
        let rules = SimilarityRules::identity(5);
        let engine = Engine::Permutation {
            permutations: 200,
            seed: 9,
        };
        let v = variance_shapley(&ds, &rules, engine).unwrap();
        let a = aggregate_squared_cs(&ds, &rules, engine, false).unwrap();
        assert!(disaggregation_residual(&v, &a) <= 1e-9 * v.total_variance);
    }

    #[test]
    fn t8_panel() {
        let ds = t8();
        let all: Vec<usize> = (0..8).collect();
        let attrs = cohort_attributions(&ds, &SimilarityRules::identity(3), &all, false, Engine::Exact).unwrap();
        let y = ds.predictions().unwrap().to_vec();
        let panel = export_panel(&ds, &attrs, &y).unwrap();
        let last = panel.ordering.iter().position(|&t| t == 7).unwrap();
        assert!(close(&panel.bars[last], &[1.0, 0.5, 0.0], 1e-12));
        // ties: rows 6 and 7 both predict 3, stable order
        assert_eq!(&panel.ordering[6..], &[6, 7]);
        for (bars, o) in panel.bars.iter().zip(&panel.overlay) {
            assert!((bars.iter().sum::<f64>() - o).abs() < 1e-12);
        }
        assert!(mean_attribution(&attrs).iter().all(|v| v.abs() < 1e-12));

        let mut out = Vec::new();
        panel.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("rank,subject,x1,x2,x3,overlay"));
        assert_eq!(lines.next(), Some("1,1,-1,-0.5,0,-1.5"));
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn bad_target() {
        let ds = t8();
        assert!(cohort_attributions(&ds, &SimilarityRules::identity(3), &[8], false, Engine::Exact).is_err());
    }
}
