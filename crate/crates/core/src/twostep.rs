//! Two-stage cascade: a binary gate forwards only SDoH-positive sentences to
//! a multilabel backend.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Corpus;
use crate::features::Featurizer;
use crate::label::LabelSet;
use crate::llm::LlmClassifier;
use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::model::{Decision, ModelError, TrainedModel, Variant};
use crate::scalar::Real;
use crate::stratify::SplitSpec;
use crate::util::bounded_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    None,
    TraditionalMultilabel,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub gate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multilabel: Option<f64>,
}

impl StageLatencies {
    pub fn total(&self) -> f64 {
        self.gate + self.multilabel.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedPrediction {
    pub id: String,
    pub gate_positive: bool,
    pub labels: LabelSet,
    pub stage_latencies: StageLatencies,
    pub backend_used: BackendKind,
    /// Set when the labels come from the fallback policy rather than the
    /// primary backend.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CascadeError {
    #[error("gate failed on `{id}`: {message}")]
    Gate { id: String, message: String },
    #[error("backend failed on gate-positive `{id}`: {message}")]
    Backend {
        id: String,
        gate_positive: bool,
        gate_seconds: f64,
        message: String,
    },
    #[error("gate must be a binary model, got {0}")]
    NotBinary(Variant),
    #[error("backend must be a multilabel model, got {0}")]
    NotMultilabel(Variant),
    #[error("no prediction for `{0}`")]
    MissingPrediction(String),
    #[error("test split is empty")]
    EmptyTest,
    #[error("record `{0}` is not in the corpus")]
    UnknownId(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub trait BinaryGate: Send + Sync {
    fn is_positive(&self, id: &str, text: &str) -> Result<bool, String>;
}

pub trait MultilabelBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn classify(&self, id: &str, text: &str) -> Result<LabelSet, String>;
}

/// Closure gate, for stubs and adapters.
pub struct FnGate<F>(pub F);

impl<F: Fn(&str, &str) -> Result<bool, String> + Send + Sync> BinaryGate for FnGate<F> {
    fn is_positive(&self, id: &str, text: &str) -> Result<bool, String> {
        (self.0)(id, text)
    }
}

/// Closure backend reporting the given kind.
pub struct FnBackend<F>(pub BackendKind, pub F);

impl<F: Fn(&str, &str) -> Result<LabelSet, String> + Send + Sync> MultilabelBackend
    for FnBackend<F>
{
    fn kind(&self) -> BackendKind {
        self.0
    }

    fn classify(&self, id: &str, text: &str) -> Result<LabelSet, String> {
        (self.1)(id, text)
    }
}

/// A trained binary model used as a gate.
pub struct ModelGate<T> {
    model: TrainedModel<T>,
    featurizer: Featurizer,
}

impl<T: Real> ModelGate<T> {
    pub fn new(model: TrainedModel<T>, featurizer: Featurizer) -> Result<Self, CascadeError> {
        match model.config.variant {
            Variant::Binary => Ok(ModelGate { model, featurizer }),
            v => Err(CascadeError::NotBinary(v)),
        }
    }
}

impl<T: Real> BinaryGate for ModelGate<T> {
    fn is_positive(&self, id: &str, text: &str) -> Result<bool, String> {
        let (_, d) = self
            .model
            .predict_text(&self.featurizer, Some(id), text)
            .map_err(|e| e.to_string())?;
        Ok(d.has_sdoh())
    }
}

/// A trained multilabel model used as a backend.
pub struct ModelBackend<T> {
    model: TrainedModel<T>,
    featurizer: Featurizer,
}

impl<T: Real> ModelBackend<T> {
    pub fn new(model: TrainedModel<T>, featurizer: Featurizer) -> Result<Self, CascadeError> {
        match model.config.variant {
            Variant::Multilabel => Ok(ModelBackend { model, featurizer }),
            v => Err(CascadeError::NotMultilabel(v)),
        }
    }

    pub fn predict(&self, id: &str, text: &str) -> Result<LabelSet, ModelError> {
        let (_, d) = self.model.predict_text(&self.featurizer, Some(id), text)?;
        Ok(match d {
            Decision::Labels(l) => l,
            Decision::Presence(_) => LabelSet::EMPTY,
        })
    }
}

impl<T: Real> MultilabelBackend for ModelBackend<T> {
    fn kind(&self) -> BackendKind {
        BackendKind::TraditionalMultilabel
    }

    fn classify(&self, id: &str, text: &str) -> Result<LabelSet, String> {
        self.predict(id, text).map_err(|e| e.to_string())
    }
}

impl MultilabelBackend for LlmClassifier {
    fn kind(&self) -> BackendKind {
        BackendKind::Llm
    }

    fn classify(&self, _id: &str, text: &str) -> Result<LabelSet, String> {
        LlmClassifier::classify(self, text)
            .map(|p| p.labels)
            .map_err(|e| e.to_string())
    }
}

/// What to do when the backend fails on a gate-positive sentence.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    #[default]
    Error,
    EmptyLabels,
    /// Use the cascade's fallback backend, normally the traditional model.
    Traditional,
}

pub struct Cascade<'a> {
    pub gate: &'a dyn BinaryGate,
    pub backend: &'a dyn MultilabelBackend,
    pub fallback_policy: FallbackPolicy,
    pub fallback_backend: Option<&'a dyn MultilabelBackend>,
    /// Bound on concurrent backend calls in [`Cascade::route_batch`].
    pub max_in_flight: usize,
}

impl<'a> Cascade<'a> {
    pub fn new(gate: &'a dyn BinaryGate, backend: &'a dyn MultilabelBackend) -> Self {
        Cascade {
            gate,
            backend,
            fallback_policy: FallbackPolicy::Error,
            fallback_backend: None,
            max_in_flight: 1,
        }
    }

    fn gate(&self, id: &str, text: &str) -> Result<(bool, f64), CascadeError> {
        let t0 = Instant::now();
        let positive = self
            .gate
            .is_positive(id, text)
            .map_err(|message| CascadeError::Gate {
                id: id.to_string(),
                message,
            })?;
        Ok((positive, t0.elapsed().as_secs_f64()))
    }

    fn run_backend(
        &self,
        id: &str,
        text: &str,
        gate_seconds: f64,
    ) -> Result<RoutedPrediction, CascadeError> {
        let t0 = Instant::now();
        let primary = self.backend.classify(id, text);
        let (labels, backend_used, fallback) = match primary {
            Ok(labels) => (labels, self.backend.kind(), false),
            Err(message) => match (self.fallback_policy, self.fallback_backend) {
                (FallbackPolicy::EmptyLabels, _) => (LabelSet::EMPTY, self.backend.kind(), true),
                (FallbackPolicy::Traditional, Some(fb)) => {
                    let labels = fb.classify(id, text).map_err(|m| CascadeError::Backend {
                        id: id.to_string(),
                        gate_positive: true,
                        gate_seconds,
                        message: format!("{message}; fallback also failed: {m}"),
                    })?;
                    (labels, fb.kind(), true)
                }
                _ => {
                    return Err(CascadeError::Backend {
                        id: id.to_string(),
                        gate_positive: true,
                        gate_seconds,
                        message,
                    })
                }
            },
        };
        Ok(RoutedPrediction {
            id: id.to_string(),
            gate_positive: true,
            labels,
            stage_latencies: StageLatencies {
                gate: gate_seconds,
                multilabel: Some(t0.elapsed().as_secs_f64()),
            },
            backend_used,
            fallback,
        })
    }

    fn negative(id: &str, gate_seconds: f64) -> RoutedPrediction {
        RoutedPrediction {
            id: id.to_string(),
            gate_positive: false,
            labels: LabelSet::EMPTY,
            stage_latencies: StageLatencies {
                gate: gate_seconds,
                multilabel: None,
            },
            backend_used: BackendKind::None,
            fallback: false,
        }
    }

    pub fn route(&self, id: &str, text: &str) -> Result<RoutedPrediction, CascadeError> {
        let (positive, gate_seconds) = self.gate(id, text)?;
        if positive {
            self.run_backend(id, text, gate_seconds)
        } else {
            Ok(Self::negative(id, gate_seconds))
        }
    }

    /// Gates every item in order, then runs the backend on the positives with
    /// at most `max_in_flight` concurrent calls. Results follow input order.
    pub fn route_batch(
        &self,
        items: &[(String, String)],
    ) -> Vec<Result<RoutedPrediction, CascadeError>> {
        let gated: Vec<Result<(bool, f64), CascadeError>> =
            items.iter().map(|(id, t)| self.gate(id, t)).collect();
        let positives: Vec<usize> = gated
            .iter()
            .enumerate()
            .filter(|(_, g)| matches!(g, Ok((true, _))))
            .map(|(i, _)| i)
            .collect();
        let mut backend_out: HashMap<usize, Result<RoutedPrediction, CascadeError>> = positives
            .iter()
            .copied()
            .zip(bounded_map(&positives, self.max_in_flight, |&i| {
                let gate_seconds = gated[i].as_ref().map(|g| g.1).unwrap_or_default();
                self.run_backend(&items[i].0, &items[i].1, gate_seconds)
            }))
            .collect();
        gated
            .into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Err(e) => Err(e),
                Ok((false, secs)) => Ok(Self::negative(&items[i].0, secs)),
                Ok((true, _)) => backend_out
                    .remove(&i)
                    .expect("backend ran for every positive"),
            })
            .collect()
    }
}

/// A stage prediction read from a file, for offline joining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePrediction {
    pub id: String,
    pub labels: LabelSet,
    /// Seconds spent on this record, if the producer recorded it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_seconds: Option<f64>,
}

/// Simulates the cascade by joining per-stage predictions on record id. A
/// gate prediction is positive iff its label set is non-empty.
pub fn join_offline(
    ids: &[String],
    gate: &[StagePrediction],
    backend: &[StagePrediction],
    backend_kind: BackendKind,
) -> Result<Vec<RoutedPrediction>, CascadeError> {
    let gate: HashMap<&str, &StagePrediction> = gate.iter().map(|p| (p.id.as_str(), p)).collect();
    let backend: HashMap<&str, &StagePrediction> =
        backend.iter().map(|p| (p.id.as_str(), p)).collect();
    ids.iter()
        .map(|id| {
            let g = gate
                .get(id.as_str())
                .ok_or_else(|| CascadeError::MissingPrediction(id.clone()))?;
            let gate_seconds = g.latency_seconds.unwrap_or(0.0);
            if g.labels.is_empty() {
                return Ok(Cascade::negative(id, gate_seconds));
            }
            let b = backend
                .get(id.as_str())
                .ok_or_else(|| CascadeError::MissingPrediction(id.clone()))?;
            Ok(RoutedPrediction {
                id: id.clone(),
                gate_positive: true,
                labels: b.labels,
                stage_latencies: StageLatencies {
                    gate: gate_seconds,
                    multilabel: Some(b.latency_seconds.unwrap_or(0.0)),
                },
                backend_used: backend_kind,
                fallback: false,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeLatency {
    pub n_sentences: usize,
    pub backend_calls: usize,
    pub total_seconds: f64,
    pub sentences_per_second: f64,
    pub mean_gate_seconds: f64,
    /// Mean over sentences that reached the backend; 0 if none did.
    pub mean_backend_seconds: f64,
}

impl CascadeLatency {
    pub fn from_predictions(preds: &[RoutedPrediction]) -> Self {
        let n = preds.len();
        let total: f64 = preds.iter().map(|p| p.stage_latencies.total()).sum();
        let gate: f64 = preds.iter().map(|p| p.stage_latencies.gate).sum();
        let backend: Vec<f64> = preds
            .iter()
            .filter_map(|p| p.stage_latencies.multilabel)
            .collect();
        CascadeLatency {
            n_sentences: n,
            backend_calls: backend.len(),
            total_seconds: total,
            sentences_per_second: if total > 0.0 { n as f64 / total } else { 0.0 },
            mean_gate_seconds: if n > 0 { gate / n as f64 } else { 0.0 },
            mean_backend_seconds: if backend.is_empty() {
                0.0
            } else {
                backend.iter().sum::<f64>() / backend.len() as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub metrics: MetricsReport<f64>,
    pub latency: CascadeLatency,
    pub predictions: Vec<RoutedPrediction>,
}

/// Routes every test sentence and scores the result against gold labels.
pub fn evaluate_cascade(
    cascade: &Cascade<'_>,
    corpus: &Corpus,
    split: &SplitSpec,
) -> Result<CascadeReport, CascadeError> {
    if split.test.is_empty() {
        return Err(CascadeError::EmptyTest);
    }
    let index = corpus.index();
    let records = split
        .test
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| &corpus.records()[i])
                .ok_or_else(|| CascadeError::UnknownId(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let items: Vec<(String, String)> = records
        .iter()
        .map(|r| (r.id.clone(), r.text.clone()))
        .collect();
    let predictions = cascade
        .route_batch(&items)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let gold: Vec<LabelSet> = records.iter().map(|r| r.gold).collect();
    let pred: Vec<LabelSet> = predictions.iter().map(|p| p.labels).collect();
    Ok(CascadeReport {
        metrics: evaluate(&gold, &pred)?,
        latency: CascadeLatency::from_predictions(&predictions),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::SdohLabel;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn set(l: &[SdohLabel]) -> LabelSet {
        l.iter().copied().collect()
    }

    struct Counting {
        calls: AtomicUsize,
        answer: LabelSet,
    }

    impl MultilabelBackend for Counting {
        fn kind(&self) -> BackendKind {
            BackendKind::Llm
        }
        fn classify(&self, _: &str, _: &str) -> Result<LabelSet, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.answer)
        }
    }

    fn keyword_gate() -> FnGate<impl Fn(&str, &str) -> Result<bool, String>> {
        FnGate(|_: &str, t: &str| Ok(t.contains("home")))
    }

    #[test]
    fn negative_gate_short_circuits() {
        let gate = keyword_gate();
        let backend = Counting {
            calls: AtomicUsize::new(0),
            answer: set(&[SdohLabel::Housing]),
        };
        let c = Cascade::new(&gate, &backend);
        let p = c.route("1", "Vitals stable.").unwrap();
        assert!(!p.gate_positive && p.labels.is_empty());
        assert_eq!(p.stage_latencies.multilabel, None);
        assert_eq!(p.backend_used, BackendKind::None);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
        let p = c.route("2", "Lives at home.").unwrap();
        assert_eq!(p.labels, set(&[SdohLabel::Housing]));
        assert_eq!(p.backend_used, BackendKind::Llm);
    }

    #[test]
    fn batch_calls_backend_once_per_positive() {
        let gate = keyword_gate();
        let backend = Counting {
            calls: AtomicUsize::new(0),
            answer: LabelSet::EMPTY,
        };
        let mut c = Cascade::new(&gate, &backend);
        c.max_in_flight = 4;
        let items: Vec<(String, String)> = (0..23)
            .map(|i| {
                (
                    i.to_string(),
                    if i % 3 == 0 {
                        "home".into()
                    } else {
                        "x".into()
                    },
                )
            })
            .collect();
        let out = c.route_batch(&items);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 8);
        let ids: Vec<String> = out.iter().map(|r| r.as_ref().unwrap().id.clone()).collect();
        assert_eq!(ids, items.iter().map(|i| i.0.clone()).collect::<Vec<_>>());
        // an empty backend answer stays empty
        assert!(out[0].as_ref().unwrap().labels.is_empty());
    }

    #[test]
    fn fallback_policies() {
        let gate = FnGate(|_: &str, _: &str| Ok(true));
        let failing = FnBackend(BackendKind::Llm, |_: &str, _: &str| {
            Err::<LabelSet, _>("timeout".to_string())
        });
        let trad = FnBackend(BackendKind::TraditionalMultilabel, |_: &str, _: &str| {
            Ok(set(&[SdohLabel::Support]))
        });
        let mut c = Cascade::new(&gate, &failing);
        match c.route("a", "t") {
            Err(CascadeError::Backend { gate_positive, .. }) => assert!(gate_positive),
            other => panic!("{other:?}"),
        }
        c.fallback_policy = FallbackPolicy::EmptyLabels;
        let p = c.route("a", "t").unwrap();
        assert!(p.labels.is_empty() && p.fallback);
        c.fallback_policy = FallbackPolicy::Traditional;
        c.fallback_backend = Some(&trad);
        let p = c.route("a", "t").unwrap();
        assert_eq!(p.labels, set(&[SdohLabel::Support]));
        assert_eq!(p.backend_used, BackendKind::TraditionalMultilabel);
    }

    #[test]
    fn offline_join_matches_routing() {
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let gate = vec![
            StagePrediction {
                id: "a".into(),
                labels: set(&[SdohLabel::Parent]),
                latency_seconds: Some(0.01),
            },
            StagePrediction {
                id: "b".into(),
                labels: LabelSet::EMPTY,
                latency_seconds: Some(0.01),
            },
        ];
        let backend = vec![StagePrediction {
            id: "a".into(),
            labels: set(&[SdohLabel::Housing]),
            latency_seconds: Some(0.2),
        }];
        let out = join_offline(&ids, &gate, &backend, BackendKind::Llm).unwrap();
        assert_eq!(out[0].labels, set(&[SdohLabel::Housing]));
        assert!((out[0].stage_latencies.total() - 0.21).abs() < 1e-12);
        assert!(out[1].labels.is_empty());
        assert!(join_offline(&ids, &gate, &[], BackendKind::Llm).is_err());
    }

    #[test]
    fn routed_prediction_json_shape() {
        let p = Cascade::negative("z", 0.5);
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["backend_used"], "none");
        assert_eq!(v["labels"], serde_json::json!([]));
        assert!(v["stage_latencies"].get("multilabel").is_none());
    }
}
