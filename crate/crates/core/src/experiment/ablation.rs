//! Feature-set sweep: one multilabel model per feature set, same split and
//! training settings.

use std::fs;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::{examples_for, featurize_all, score_multilabel, ExperimentConfig};
use crate::dataset::Corpus;
use crate::features::{feature_set_name, parse_feature_set, FeatureConfig};
use crate::stratify::SplitSpec;

/// One point of a validation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub feature_set: String,
    pub epoch: usize,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTest {
    pub feature_set: String,
    pub selected_epoch: usize,
    pub test_macro_f1: f64,
    pub test_weighted_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub curves: Vec<AblationRow>,
    pub tests: Vec<AblationTest>,
    /// Feature sets that failed, with the error. The sweep goes on without them.
    pub failures: Vec<(String, String)>,
}

fn run_one(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    split: &SplitSpec,
    name: &str,
) -> Result<(Vec<AblationRow>, AblationTest), String> {
    let kinds = parse_feature_set(name).map_err(|e| e.to_string())?;
    let label = feature_set_name(&kinds);
    let mut model = cfg.multilabel.model.clone();
    let mut features = FeatureConfig::with_features(&kinds);
    features.vocabularies = model.features.vocabularies.clone();
    features.dep_cap = model.features.dep_cap;
    features.embedder = model.features.embedder.clone();
    features.cui_dim = model.features.cui_dim;
    features.optional = model.features.optional.clone();
    model.features = features;
    model.validate().map_err(|e| e.to_string())?;

    let (_, examples, index) = featurize_all(&model, &cfg.annotations, corpus)?;
    let tr = examples_for(&index, &examples, &split.train);
    let va = examples_for(&index, &examples, &split.validation);
    let te = examples_for(&index, &examples, &split.test);
    let m =
        crate::model::fit(&model, &cfg.multilabel.train, &tr, &va).map_err(|e| e.to_string())?;
    let report = score_multilabel(&m, &te)?;
    let rows = m
        .curve
        .iter()
        .map(|r| AblationRow {
            feature_set: label.clone(),
            epoch: r.epoch,
            val_macro_f1: r.val_macro_f1,
        })
        .collect();
    let test = AblationTest {
        feature_set: label,
        selected_epoch: m.selected_epoch,
        test_macro_f1: report.macro_.scores.f1,
        test_weighted_f1: report.weighted.scores.f1,
    };
    Ok((rows, test))
}

/// Trains one model per `cfg.ablation` entry and writes `curves.csv`,
/// `test.csv`, `failures.json` and `curves.svg` into `out_dir`.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    split: &SplitSpec,
    out_dir: &Path,
) -> Result<AblationOutcome, String> {
    fs::create_dir_all(out_dir).map_err(|e| e.to_string())?;
    let mut outcome = AblationOutcome::default();
    for name in &cfg.ablation {
        match run_one(cfg, corpus, split, name) {
            Ok((rows, test)) => {
                outcome.curves.extend(rows);
                outcome.tests.push(test);
            }
            Err(e) => outcome.failures.push((name.clone(), e)),
        }
    }
    write_csv(&out_dir.join("curves.csv"), &outcome.curves)?;
    write_csv(&out_dir.join("test.csv"), &outcome.tests)?;
    let failures = serde_json::to_string_pretty(&outcome.failures).map_err(|e| e.to_string())?;
    fs::write(out_dir.join("failures.json"), failures + "\n").map_err(|e| e.to_string())?;
    plot_curves(&outcome.curves, &out_dir.join("curves.svg"))?;
    Ok(outcome)
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), String> {
    let mut w = csv::Writer::from_path(path).map_err(|e| e.to_string())?;
    for r in rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}

/// Validation macro F1 per epoch, one line per feature set, with triangle
/// markers.
pub fn plot_curves(rows: &[AblationRow], path: &Path) -> Result<(), String> {
    let mut sets: Vec<&str> = Vec::new();
    for r in rows {
        if !sets.contains(&r.feature_set.as_str()) {
            sets.push(&r.feature_set);
        }
    }
    let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(1).max(1);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| e.to_string();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("validation macro F1 by epoch", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0usize..max_epoch + 1, 0f64..1f64)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("macro F1")
        .draw()
        .map_err(|e| err(&e))?;
    for (i, set) in sets.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let points: Vec<(usize, f64)> = rows
            .iter()
            .filter(|r| r.feature_set == *set)
            .map(|r| (r.epoch, r.val_macro_f1))
            .collect();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(*set)
            .legend(move |(x, y)| TriangleMarker::new((x + 10, y), 5, color.filled()));
        chart
            .draw_series(
                points
                    .into_iter()
                    .map(|p| TriangleMarker::new(p, 5, color.filled())),
            )
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
