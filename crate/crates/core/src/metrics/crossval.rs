use std::fmt::Display;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MetricsReport, Prf};
use crate::stratify::{Fold, FoldPlan};

#[derive(Debug, thiserror::Error)]
#[error("fold (repeat {repeat}, fold {fold}) failed: {message}")]
pub struct CrossValError {
    pub repeat: usize,
    pub fold: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub micro: Prf<f64>,
    #[serde(rename = "macro")]
    pub macro_: Prf<f64>,
    pub weighted: Prf<f64>,
}

impl AggregateScores {
    fn of(r: &MetricsReport<f64>) -> Self {
        AggregateScores {
            micro: r.micro.scores,
            macro_: r.macro_.scores,
            weighted: r.weighted.scores,
        }
    }

    fn to_array(self) -> [f64; 9] {
        let p = |s: Prf<f64>| [s.precision, s.recall, s.f1];
        let [a, b, c] = [p(self.micro), p(self.macro_), p(self.weighted)];
        [a[0], a[1], a[2], b[0], b[1], b[2], c[0], c[1], c[2]]
    }

    fn from_array(v: [f64; 9]) -> Self {
        let p = |i: usize| Prf {
            precision: v[i],
            recall: v[i + 1],
            f1: v[i + 2],
        };
        AggregateScores {
            micro: p(0),
            macro_: p(3),
            weighted: p(6),
        }
    }
}

/// Mean and sample (n-1) standard deviation of each aggregate score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub evaluations: usize,
    pub mean: AggregateScores,
    pub std: AggregateScores,
}

impl CvSummary {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a MetricsReport<f64>>) -> Self {
        let rows: Vec<[f64; 9]> = reports
            .into_iter()
            .map(|r| AggregateScores::of(r).to_array())
            .collect();
        let n = rows.len();
        let mut mean = [0.0; 9];
        let mut std = [0.0; 9];
        if n > 0 {
            // shifted by the first sample so constant inputs are exact
            for k in 0..9 {
                let shift = rows[0][k];
                mean[k] = shift + rows.iter().map(|r| r[k] - shift).sum::<f64>() / n as f64;
            }
        }
        if n > 1 {
            for k in 0..9 {
                let ss: f64 = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum();
                std[k] = (ss / (n - 1) as f64).sqrt();
            }
        }
        CvSummary {
            evaluations: n,
            mean: AggregateScores::from_array(mean),
            std: AggregateScores::from_array(std),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub report: MetricsReport<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub k: usize,
    pub repeats: usize,
    pub folds: Vec<FoldResult>,
    pub summary: CvSummary,
}

impl CrossValidation {
    fn from_folds(plan: &FoldPlan, folds: Vec<FoldResult>) -> Self {
        let summary = CvSummary::from_reports(folds.iter().map(|f| &f.report));
        CrossValidation {
            k: plan.k,
            repeats: plan.repeats,
            folds,
            summary,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cross-validation serializes")
    }
}

/// Runs `runner` once per (repeat, fold) in plan order. The first failure
/// aborts the run.
pub fn crossval<F, E>(plan: &FoldPlan, mut runner: F) -> Result<CrossValidation, CrossValError>
where
    F: FnMut(&Fold) -> Result<MetricsReport<f64>, E>,
    E: Display,
{
    let mut folds = Vec::with_capacity(plan.evaluations());
    for fold in plan.iter() {
        let report = runner(&fold).map_err(|e| CrossValError {
            repeat: fold.repeat,
            fold: fold.fold,
            message: e.to_string(),
        })?;
        folds.push(FoldResult {
            repeat: fold.repeat,
            fold: fold.fold,
            report,
        });
    }
    Ok(CrossValidation::from_folds(plan, folds))
}

/// Like [`crossval`] for reentrant runners; folds execute concurrently and
/// results are reported in plan order.
pub fn crossval_parallel<F, E>(plan: &FoldPlan, runner: F) -> Result<CrossValidation, CrossValError>
where
    F: Fn(&Fold) -> Result<MetricsReport<f64>, E> + Sync,
    E: Display,
{
    let cells: Vec<Fold> = plan.iter().collect();
    let folds = cells
        .par_iter()
        .map(|fold| {
            runner(fold)
                .map(|report| FoldResult {
                    repeat: fold.repeat,
                    fold: fold.fold,
                    report,
                })
                .map_err(|e| CrossValError {
                    repeat: fold.repeat,
                    fold: fold.fold,
                    message: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CrossValidation::from_folds(plan, folds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{LabelSet, SdohLabel};
    use crate::metrics::evaluate;

    fn plan(k: usize, repeats: usize) -> FoldPlan {
        let folds = (0..repeats)
            .map(|_| (0..k).map(|f| vec![format!("id{f}")]).collect())
            .collect();
        FoldPlan {
            seed: 0,
            k,
            repeats,
            folds,
        }
    }

    fn report(hit: bool) -> MetricsReport<f64> {
        let g = vec![[SdohLabel::Housing].into_iter().collect::<LabelSet>()];
        let p = if hit {
            g.clone()
        } else {
            vec![LabelSet::EMPTY]
        };
        evaluate(&g, &p).unwrap()
    }

    #[test]
    fn constant_runner_has_zero_std() {
        let cv = crossval(&plan(10, 5), |_| Ok::<_, String>(report(true))).unwrap();
        assert_eq!(cv.folds.len(), 50);
        assert_eq!(cv.summary.evaluations, 50);
        assert_eq!(cv.summary.std.macro_.f1, 0.0);
        assert_eq!(cv.summary.mean.micro.f1, 1.0);
    }

    #[test]
    fn failure_carries_coordinates() {
        let err = crossval(&plan(3, 2), |f| {
            if f.repeat == 1 && f.fold == 2 {
                Err("boom")
            } else {
                Ok(report(true))
            }
        })
        .unwrap_err();
        assert_eq!((err.repeat, err.fold), (1, 2));
        assert!(err.to_string().contains("boom"));
    }

    #[test]
    fn parallel_matches_sequential() {
        let p = plan(4, 3);
        let run = |f: &Fold| Ok::<_, String>(report((f.repeat + f.fold).is_multiple_of(2)));
        let a = crossval(&p, run).unwrap();
        let b = crossval_parallel(&p, run).unwrap();
        assert_eq!(a, b);
        // 6 hits and 6 misses of micro f1: mean 0.5, sample std sqrt(12*0.25/11)
        assert!((a.summary.mean.micro.f1 - 0.5).abs() < 1e-15);
        assert!((a.summary.std.micro.f1 - (3.0f64 / 11.0).sqrt()).abs() < 1e-15);
    }
}
