//! Per-label counts and micro, macro and weighted precision/recall/F1.
//!
//! Every function is generic over [`Scalar`], so the same code scores in
//! `f64` or exactly in [`Rational`](crate::Rational). A ratio with a zero
//! denominator evaluates to 0 and sets a `degenerate` flag.

mod crossval;

pub use crossval::{
    crossval, crossval_parallel, AggregateScores, CrossValError, CrossValidation, CvSummary,
    FoldResult,
};

use serde::{Deserialize, Serialize};

use crate::label::{LabelSet, SdohLabel};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("gold has {gold} entries but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("class table is inconsistent: {0}")]
    Shape(String),
}

/// True positive, false positive and false negative counts per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub classes: Vec<String>,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
}

impl LabelCounts {
    pub fn new(
        classes: Vec<String>,
        tp: Vec<u64>,
        fp: Vec<u64>,
        fn_: Vec<u64>,
    ) -> Result<Self, MetricsError> {
        let n = classes.len();
        if n == 0 || tp.len() != n || fp.len() != n || fn_.len() != n {
            return Err(MetricsError::Shape(format!(
                "{} classes, {} tp, {} fp, {} fn",
                n,
                tp.len(),
                fp.len(),
                fn_.len()
            )));
        }
        Ok(LabelCounts {
            classes,
            tp,
            fp,
            fn_,
        })
    }

    fn zeros(classes: Vec<String>) -> Self {
        let n = classes.len();
        LabelCounts {
            classes,
            tp: vec![0; n],
            fp: vec![0; n],
            fn_: vec![0; n],
        }
    }

    /// Multilabel counts over the six SDoH labels, aligned by index.
    pub fn count(gold: &[LabelSet], pred: &[LabelSet]) -> Result<Self, MetricsError> {
        if gold.len() != pred.len() {
            return Err(MetricsError::LengthMismatch {
                gold: gold.len(),
                pred: pred.len(),
            });
        }
        let mut c = Self::zeros(SdohLabel::ALL.iter().map(|l| l.to_string()).collect());
        for (g, p) in gold.iter().zip(pred) {
            for l in SdohLabel::ALL {
                let i = l.index();
                match (g.contains(l), p.contains(l)) {
                    (true, true) => c.tp[i] += 1,
                    (false, true) => c.fp[i] += 1,
                    (true, false) => c.fn_[i] += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(c)
    }

    /// SDoH presence task: a single positive class.
    pub fn binary(gold: &[bool], pred: &[bool]) -> Result<Self, MetricsError> {
        let two = Self::binary_two_class(gold, pred)?;
        Ok(LabelCounts {
            classes: vec![two.classes[1].clone()],
            tp: vec![two.tp[1]],
            fp: vec![two.fp[1]],
            fn_: vec![two.fn_[1]],
        })
    }

    /// Presence task scored over both classes (`no_sdoh`, `sdoh`), the form
    /// whose macro average is reported for binary classifiers.
    pub fn binary_two_class(gold: &[bool], pred: &[bool]) -> Result<Self, MetricsError> {
        if gold.len() != pred.len() {
            return Err(MetricsError::LengthMismatch {
                gold: gold.len(),
                pred: pred.len(),
            });
        }
        let mut c = Self::zeros(vec!["no_sdoh".into(), "sdoh".into()]);
        for (&g, &p) in gold.iter().zip(pred) {
            let (gi, pi) = (g as usize, p as usize);
            if gi == pi {
                c.tp[gi] += 1;
            } else {
                c.fp[pi] += 1;
                c.fn_[gi] += 1;
            }
        }
        Ok(c)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn support(&self, i: usize) -> u64 {
        self.tp[i] + self.fn_[i]
    }

    pub fn total_support(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.support(i)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf<T> {
    pub precision: T,
    pub recall: T,
    pub f1: T,
}

impl<T: Scalar> Prf<T> {
    fn zero() -> Self {
        Prf {
            precision: T::zero(),
            recall: T::zero(),
            f1: T::zero(),
        }
    }

    pub fn to_f64(self) -> Prf<f64> {
        Prf {
            precision: self.precision.to_f64(),
            recall: self.recall.to_f64(),
            f1: self.f1.to_f64(),
        }
    }
}

/// An averaged score. `degenerate` is set when any ratio it depends on had a
/// zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averaged<T> {
    #[serde(flatten)]
    pub scores: Prf<T>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores<T> {
    pub class: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub support: u64,
    #[serde(flatten)]
    pub scores: Prf<T>,
    pub degenerate: bool,
}

fn ratio<T: Scalar>(num: u64, den: u64) -> (T, bool) {
    if den == 0 {
        (T::zero(), true)
    } else {
        (T::from_count(num) / T::from_count(den), false)
    }
}

fn harmonic<T: Scalar>(p: T, r: T) -> (T, bool) {
    let sum = p + r;
    if sum == T::zero() {
        (T::zero(), true)
    } else {
        let two = T::one() + T::one();
        (two * p * r / sum, false)
    }
}

pub fn per_class<T: Scalar>(c: &LabelCounts) -> Vec<ClassScores<T>> {
    (0..c.n_classes())
        .map(|i| {
            let (precision, dp) = ratio::<T>(c.tp[i], c.tp[i] + c.fp[i]);
            let (recall, dr) = ratio::<T>(c.tp[i], c.tp[i] + c.fn_[i]);
            let (f1, df) = harmonic(precision, recall);
            ClassScores {
                class: c.classes[i].clone(),
                tp: c.tp[i],
                fp: c.fp[i],
                fn_: c.fn_[i],
                support: c.support(i),
                scores: Prf {
                    precision,
                    recall,
                    f1,
                },
                degenerate: dp || dr || df,
            }
        })
        .collect()
}

/// Pooled counts across classes.
pub fn micro<T: Scalar>(c: &LabelCounts) -> Averaged<T> {
    let tp: u64 = c.tp.iter().sum();
    let fp: u64 = c.fp.iter().sum();
    let fn_: u64 = c.fn_.iter().sum();
    let (precision, dp) = ratio::<T>(tp, tp + fp);
    let (recall, dr) = ratio::<T>(tp, tp + fn_);
    let (f1, df) = ratio::<T>(2 * tp, 2 * tp + fp + fn_);
    Averaged {
        scores: Prf {
            precision,
            recall,
            f1,
        },
        degenerate: dp || dr || df,
    }
}

/// Unweighted mean of per-class scores. F1 is the mean of per-class F1.
pub fn macro_average<T: Scalar>(c: &LabelCounts) -> Averaged<T> {
    let classes = per_class::<T>(c);
    let n = T::from_count(classes.len() as u64);
    let mut sum = Prf::<T>::zero();
    for s in &classes {
        sum.precision = sum.precision + s.scores.precision;
        sum.recall = sum.recall + s.scores.recall;
        sum.f1 = sum.f1 + s.scores.f1;
    }
    Averaged {
        scores: Prf {
            precision: sum.precision / n,
            recall: sum.recall / n,
            f1: sum.f1 / n,
        },
        degenerate: classes.iter().any(|s| s.degenerate),
    }
}

/// Support-proportional class weights. All zero when nothing has support.
pub fn class_weights<T: Scalar>(c: &LabelCounts) -> Vec<T> {
    let total = c.total_support();
    (0..c.n_classes())
        .map(|i| ratio::<T>(c.support(i), total).0)
        .collect()
}

/// Support-weighted sum of per-class scores. Zero-support classes get weight 0.
pub fn weighted<T: Scalar>(c: &LabelCounts) -> Averaged<T> {
    if c.total_support() == 0 {
        return Averaged {
            scores: Prf::zero(),
            degenerate: true,
        };
    }
    let weights = class_weights::<T>(c);
    let classes = per_class::<T>(c);
    let mut sum = Prf::<T>::zero();
    let mut degenerate = false;
    for (w, s) in weights.iter().zip(&classes) {
        if *w == T::zero() {
            continue;
        }
        degenerate |= s.degenerate;
        sum.precision = sum.precision + *w * s.scores.precision;
        sum.recall = sum.recall + *w * s.scores.recall;
        sum.f1 = sum.f1 + *w * s.scores.f1;
    }
    Averaged {
        scores: sum,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub n_classes: usize,
    pub classes: Vec<ClassScores<T>>,
    pub weights: Vec<T>,
    pub micro: Averaged<T>,
    #[serde(rename = "macro")]
    pub macro_: Averaged<T>,
    pub weighted: Averaged<T>,
}

impl<T: Scalar> MetricsReport<T> {
    pub fn from_counts(c: &LabelCounts) -> Self {
        MetricsReport {
            n_classes: c.n_classes(),
            classes: per_class(c),
            weights: class_weights(c),
            micro: micro(c),
            macro_: macro_average(c),
            weighted: weighted(c),
        }
    }

    pub fn counts(&self) -> LabelCounts {
        LabelCounts {
            classes: self.classes.iter().map(|s| s.class.clone()).collect(),
            tp: self.classes.iter().map(|s| s.tp).collect(),
            fp: self.classes.iter().map(|s| s.fp).collect(),
            fn_: self.classes.iter().map(|s| s.fn_).collect(),
        }
    }

    pub fn to_f64(&self) -> MetricsReport<f64> {
        let avg = |a: &Averaged<T>| Averaged {
            scores: a.scores.to_f64(),
            degenerate: a.degenerate,
        };
        MetricsReport {
            n_classes: self.n_classes,
            classes: self
                .classes
                .iter()
                .map(|s| ClassScores {
                    class: s.class.clone(),
                    tp: s.tp,
                    fp: s.fp,
                    fn_: s.fn_,
                    support: s.support,
                    scores: s.scores.to_f64(),
                    degenerate: s.degenerate,
                })
                .collect(),
            weights: self.weights.iter().map(|w| w.to_f64()).collect(),
            micro: avg(&self.micro),
            macro_: avg(&self.macro_),
            weighted: avg(&self.weighted),
        }
    }
}

/// Multilabel report over the six labels.
pub fn evaluate<T: Scalar>(
    gold: &[LabelSet],
    pred: &[LabelSet],
) -> Result<MetricsReport<T>, MetricsError> {
    Ok(MetricsReport::from_counts(&LabelCounts::count(gold, pred)?))
}

/// Presence report over `no_sdoh` and `sdoh`.
pub fn evaluate_binary<T: Scalar>(
    gold: &[bool],
    pred: &[bool],
) -> Result<MetricsReport<T>, MetricsError> {
    Ok(MetricsReport::from_counts(&LabelCounts::binary_two_class(
        gold, pred,
    )?))
}

impl MetricsReport<f64> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per class plus micro/macro/weighted rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "class",
            "precision",
            "recall",
            "f1",
            "support",
            "tp",
            "fp",
            "fn",
        ])
        .expect("in-memory csv");
        for s in &self.classes {
            w.write_record([
                s.class.clone(),
                format!("{:.6}", s.scores.precision),
                format!("{:.6}", s.scores.recall),
                format!("{:.6}", s.scores.f1),
                s.support.to_string(),
                s.tp.to_string(),
                s.fp.to_string(),
                s.fn_.to_string(),
            ])
            .expect("in-memory csv");
        }
        let support: u64 = self.classes.iter().map(|s| s.support).sum();
        for (name, a) in [
            ("micro", &self.micro),
            ("macro", &self.macro_),
            ("weighted", &self.weighted),
        ] {
            w.write_record([
                name.to_string(),
                format!("{:.6}", a.scores.precision),
                format!("{:.6}", a.scores.recall),
                format!("{:.6}", a.scores.f1),
                support.to_string(),
                String::new(),
                String::new(),
                String::new(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>9} {:>9} {:>9} {:>8}\n",
            "class", "precision", "recall", "f1", "support"
        );
        let row = |name: &str, p: &Prf<f64>, support: u64| {
            format!(
                "{:<16} {:>9.3} {:>9.3} {:>9.3} {:>8}\n",
                name, p.precision, p.recall, p.f1, support
            )
        };
        for s in &self.classes {
            out.push_str(&row(&s.class, &s.scores, s.support));
        }
        let support: u64 = self.classes.iter().map(|s| s.support).sum();
        out.push_str(&row("micro avg", &self.micro.scores, support));
        out.push_str(&row("macro avg", &self.macro_.scores, support));
        out.push_str(&row("weighted avg", &self.weighted.scores, support));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rational;
    use proptest::prelude::*;

    fn counts(tp: &[u64], fp: &[u64], fn_: &[u64]) -> LabelCounts {
        let classes = (0..tp.len()).map(|i| format!("c{i}")).collect();
        LabelCounts::new(classes, tp.to_vec(), fp.to_vec(), fn_.to_vec()).unwrap()
    }

    fn set(labels: &[SdohLabel]) -> LabelSet {
        labels.iter().copied().collect()
    }

    #[test]
    fn count_basic_cases() {
        let c = LabelCounts::count(&[set(&[SdohLabel::Housing])], &[set(&[SdohLabel::Housing])])
            .unwrap();
        assert_eq!(c.tp, vec![1, 0, 0, 0, 0, 0]);
        assert_eq!(c.fp.iter().sum::<u64>() + c.fn_.iter().sum::<u64>(), 0);
        let c = LabelCounts::count(&[set(&[SdohLabel::Housing])], &[LabelSet::EMPTY]).unwrap();
        assert_eq!(c.fn_[SdohLabel::Housing.index()], 1);
        assert_eq!(c.tp.iter().sum::<u64>(), 0);
        assert!(matches!(
            LabelCounts::count(&[LabelSet::EMPTY], &[]),
            Err(MetricsError::LengthMismatch { gold: 1, pred: 0 })
        ));
    }

    #[test]
    fn micro_hand_computed() {
        let c = counts(&[3, 1], &[1, 0], &[0, 2]);
        let m = micro::<Rational>(&c);
        assert_eq!(m.scores.precision, Rational::new(4, 5));
        assert_eq!(m.scores.recall, Rational::new(4, 6));
        assert_eq!(m.scores.f1, Rational::new(8, 11));
        assert!(!m.degenerate);
    }

    #[test]
    fn all_zero_is_degenerate() {
        let c = counts(&[0, 0], &[0, 0], &[0, 0]);
        let m = micro::<f64>(&c);
        assert_eq!(
            (m.scores.precision, m.scores.recall, m.scores.f1),
            (0.0, 0.0, 0.0)
        );
        assert!(m.degenerate);
        assert!(weighted::<f64>(&c).degenerate);
    }

    #[test]
    fn perfect_predictions() {
        let g = vec![
            set(&[SdohLabel::Parent, SdohLabel::Support]),
            set(&[SdohLabel::Housing]),
        ];
        let r = evaluate::<Rational>(&g, &g).unwrap();
        assert_eq!(r.micro.scores.f1, Rational::from_integer(1));
        assert_eq!(r.weighted.scores.f1, Rational::from_integer(1));
    }

    #[test]
    fn macro_is_mean_of_class_f1() {
        let c = counts(&[5, 0], &[0, 3], &[0, 2]);
        let m = macro_average::<Rational>(&c);
        assert_eq!(m.scores.f1, Rational::new(1, 2));
        assert!(m.degenerate, "class with zero tp has undefined f1 ratio");
    }

    #[test]
    fn weighted_supports_nine_to_one() {
        // class 0: 9 supports all correct; class 1: 1 support missed
        let c = counts(&[9, 0], &[0, 0], &[0, 1]);
        let w = weighted::<Rational>(&c);
        assert_eq!(w.scores.f1, Rational::new(9, 10));
        assert_eq!(
            class_weights::<Rational>(&c),
            vec![Rational::new(9, 10), Rational::new(1, 10)]
        );
    }

    #[test]
    fn single_class_collapse() {
        let c = counts(&[4], &[2], &[1]);
        let per = per_class::<Rational>(&c);
        let (m, w) = (macro_average::<Rational>(&c), weighted::<Rational>(&c));
        assert_eq!(m.scores, per[0].scores);
        assert_eq!(w.scores, per[0].scores);
    }

    #[test]
    fn uniform_support_weighted_equals_macro() {
        let c = counts(&[3, 1, 2], &[1, 4, 0], &[1, 3, 2]);
        assert_eq!(
            weighted::<Rational>(&c).scores,
            macro_average::<Rational>(&c).scores
        );
    }

    #[test]
    fn zero_support_class_is_excluded_from_weighted() {
        let c = counts(&[2, 0], &[1, 5], &[0, 0]);
        assert_eq!(class_weights::<Rational>(&c)[1], Rational::from_integer(0));
        assert_eq!(
            weighted::<Rational>(&c).scores,
            per_class::<Rational>(&c)[0].scores
        );
    }

    #[test]
    fn binary_is_positive_class_of_two_class() {
        let gold = [true, false, true, true, false, false];
        let pred = [true, true, false, true, false, false];
        let one = LabelCounts::binary(&gold, &pred).unwrap();
        let two = LabelCounts::binary_two_class(&gold, &pred).unwrap();
        assert_eq!(
            (one.tp[0], one.fp[0], one.fn_[0]),
            (two.tp[1], two.fp[1], two.fn_[1])
        );
        assert_eq!((one.tp[0], one.fp[0], one.fn_[0]), (2, 1, 1));
        let r1 = MetricsReport::<Rational>::from_counts(&one);
        let r2 = MetricsReport::<Rational>::from_counts(&two);
        assert_eq!(r1.classes[0].scores, r2.classes[1].scores);
    }

    #[test]
    fn report_exports() {
        let g = vec![set(&[SdohLabel::Parent]), LabelSet::EMPTY];
        let p = vec![set(&[SdohLabel::Parent]), set(&[SdohLabel::Housing])];
        let r = evaluate::<f64>(&g, &p).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6 + 3);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(v["macro"]["f1"].is_number());
        assert!(r.to_table().contains("weighted avg"));
    }

    proptest! {
        #[test]
        fn scores_in_unit_interval_and_weights_sum_to_one(
            tp in prop::collection::vec(0u64..50, 6),
            fp in prop::collection::vec(0u64..50, 6),
            fn_ in prop::collection::vec(0u64..50, 6),
        ) {
            let c = counts(&tp, &fp, &fn_);
            let r = MetricsReport::<Rational>::from_counts(&c);
            let zero = Rational::from_integer(0);
            let one = Rational::from_integer(1);
            for a in [&r.micro, &r.macro_, &r.weighted] {
                for v in [a.scores.precision, a.scores.recall, a.scores.f1] {
                    prop_assert!(v >= zero && v <= one);
                }
            }
            if c.total_support() > 0 {
                let total: Rational = r.weights.iter().copied().fold(zero, |a, b| a + b);
                prop_assert_eq!(total, one);
            }
        }
    }
}
