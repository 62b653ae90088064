//! Experiment directories: split, train, evaluate, and report from one
//! serializable config.

mod ablation;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::bench::{bench, LatencyReport};
use crate::dataset::{corpus_stats, load_corpus, merge_corpora, Corpus, SentenceRecord, Source};
use crate::features::{
    embedder_from_id, Annotator, FeatureConfig, Featurizer, LexiconLinker, Sidecar, StubTagger,
};
use crate::label::LabelSet;
use crate::llm::{
    HttpClient, LlmClassifier, PromptTemplate, RetryPolicy, TemplateKind, ENDPOINT_ENV, TOKEN_ENV,
};
use crate::metrics::{crossval, evaluate, evaluate_binary, CrossValidation, MetricsReport};
use crate::model::{
    build_examples, export_model, fit, predict_probabilities, Decision, Example, ModelConfig,
    TrainConfig, TrainedModel, Variant,
};
use crate::stratify::{
    derive_seed, make_fold_plan, stratified_split, stratified_two_way, FoldPlan, SplitSpec,
    DEFAULT_FRACTIONS,
};
use crate::twostep::{
    evaluate_cascade, Cascade, CascadeLatency, FallbackPolicy, ModelBackend, ModelGate,
    MultilabelBackend,
};
use crate::util::sha256_hex;

pub use ablation::{run_ablation, AblationOutcome, AblationRow, AblationTest};

/// Name of the marker file present while a run is unfinished or failed.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CorpusSpec {
    pub path: PathBuf,
    /// Overrides the per-line source of every record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SplitSettings {
    pub seed: u64,
    pub fractions: [f64; 3],
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            seed: 0,
            fractions: DEFAULT_FRACTIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StageConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl StageConfig {
    /// Default model and training settings for `variant`, all features on.
    pub fn new(variant: Variant) -> Self {
        StageConfig {
            model: ModelConfig::new(variant, FeatureConfig::default()),
            train: TrainConfig::for_variant(variant),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AnnotationSettings {
    /// JSONL annotation sidecar keyed by record id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
    /// JSON concept lexicon; the built-in one is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LlmSettings {
    pub template: TemplateKind,
    /// Template file replacing the shipped one of the same kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_path: Option<PathBuf>,
    /// Generation endpoint; falls back to the `SDOH_LLM_ENDPOINT` variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub max_in_flight: usize,
    pub timeout_seconds: u64,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CascadeBackendKind {
    #[default]
    Traditional,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CrossvalSettings {
    /// Which stage is cross-validated.
    #[serde(default = "default_cv_variant")]
    pub variant: Variant,
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
}

fn default_cv_variant() -> Variant {
    Variant::Multilabel
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BenchSettings {
    pub warmup: usize,
    pub repeats: usize,
    /// Test sentences used, from the start of the test split.
    pub max_sentences: usize,
}

/// Everything needed to rerun an experiment. Relative paths resolve against
/// the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExperimentConfig {
    pub name: String,
    /// One corpus, or two to run on their merge.
    pub corpora: Vec<CorpusSpec>,
    #[serde(default)]
    pub split: SplitSettings,
    pub multilabel: StageConfig,
    /// Binary gate; enables binary and cascade evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<StageConfig>,
    #[serde(default)]
    pub cascade_backend: CascadeBackendKind,
    #[serde(default)]
    pub fallback: FallbackPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<LlmSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossval: Option<CrossvalSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSettings>,
    #[serde(default)]
    pub annotations: AnnotationSettings,
    /// Feature-set names (`pos+dep`, `none`, ...) for an ablation sweep.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<String>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Multilabel-only experiment on one corpus with default settings.
    pub fn new(
        name: impl Into<String>,
        corpus: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        ExperimentConfig {
            name: name.into(),
            corpora: vec![CorpusSpec {
                path: corpus.into(),
                source: None,
            }],
            split: SplitSettings::default(),
            multilabel: StageConfig::new(Variant::Multilabel),
            binary: None,
            cascade_backend: CascadeBackendKind::default(),
            fallback: FallbackPolicy::default(),
            llm: None,
            crossval: None,
            bench: None,
            annotations: AnnotationSettings::default(),
            ablation: Vec::new(),
            output_dir: output_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.corpora.is_empty() || self.corpora.len() > 2 {
            return bad(format!(
                "expected one or two corpora, got {}",
                self.corpora.len()
            ));
        }
        if self.multilabel.model.variant != Variant::Multilabel {
            return bad("`multilabel.model.variant` must be multilabel".into());
        }
        if let Some(b) = &self.binary {
            if b.model.variant != Variant::Binary {
                return bad("`binary.model.variant` must be binary".into());
            }
        }
        if self.cascade_backend == CascadeBackendKind::Llm && self.llm.is_none() {
            return bad("cascade_backend = llm needs an `llm` section".into());
        }
        for stage in std::iter::once(&self.multilabel).chain(&self.binary) {
            stage
                .model
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            stage
                .train
                .validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        for name in &self.ablation {
            crate::features::parse_feature_set(name)
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// JSON schema of the config file.
    pub fn schema() -> String {
        serde_json::to_string_pretty(&schemars::schema_for!(ExperimentConfig))
            .expect("schema serializes")
    }
}

/// Stub taggers plus optional sidecar and lexicon, with the embedder named in
/// the feature config.
pub fn build_featurizer(
    features: &FeatureConfig,
    max_piece_chars: usize,
    annotations: &AnnotationSettings,
) -> Result<Featurizer, crate::features::FeatureError> {
    let mut annotator = Annotator::new(features.clone());
    annotator.max_piece_chars = max_piece_chars;
    annotator.taggers.push(Box::new(StubTagger::default()));
    annotator.linker = Some(Box::new(match &annotations.lexicon {
        Some(p) => LexiconLinker::load(p)?,
        None => LexiconLinker::builtin(),
    }));
    if let Some(p) = &annotations.sidecar {
        annotator.sidecar = Some(Sidecar::load(p)?);
    }
    Ok(Featurizer::new(
        annotator,
        embedder_from_id(&features.embedder, features.cui_dim)?,
    ))
}

pub fn featurizer_for(
    model: &ModelConfig,
    annotations: &AnnotationSettings,
) -> Result<Featurizer, crate::features::FeatureError> {
    build_featurizer(&model.features, model.encoder.max_piece_chars, annotations)
}

pub fn build_llm(settings: &LlmSettings) -> Result<LlmClassifier, ExperimentError> {
    let template = match &settings.template_path {
        Some(p) => PromptTemplate::load(settings.template, p)
            .map_err(|e| ExperimentError::Config(e.to_string()))?,
        None => match settings.template {
            TemplateKind::FewShot => PromptTemplate::few_shot(),
            TemplateKind::Train => PromptTemplate::train(),
        },
    };
    let endpoint = match &settings.endpoint {
        Some(e) => e.clone(),
        None => std::env::var(ENDPOINT_ENV).map_err(|_| {
            ExperimentError::Config(format!(
                "no LLM endpoint configured and {ENDPOINT_ENV} is unset"
            ))
        })?,
    };
    let client = HttpClient::new(
        endpoint,
        std::env::var(TOKEN_ENV).ok(),
        Duration::from_secs(settings.timeout_seconds),
    );
    let mut c = LlmClassifier::new(Arc::new(client), template);
    c.retry = settings.retry;
    c.max_in_flight = settings.max_in_flight;
    Ok(c)
}

/// Loads and merges the configured corpora.
pub fn load_corpora(specs: &[CorpusSpec]) -> Result<Corpus, crate::dataset::DatasetError> {
    let mut corpora = specs.iter().map(|s| load_corpus(&s.path, s.source));
    let first = corpora.next().expect("validated: at least one corpus")?;
    match corpora.next() {
        Some(second) => merge_corpora(&first, &second?),
        None => Ok(first),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusFile {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusManifest {
    files: Vec<CorpusFile>,
    records: usize,
    merged_sha256: String,
}

/// Deterministic scores of one run; rerunning the same config reproduces
/// this file byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub name: String,
    pub corpus_sha256: String,
    pub split_sha256: String,
    pub multilabel_selected_epoch: usize,
    pub multilabel: MetricsReport<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_selected_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<MetricsReport<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cascade: Option<MetricsReport<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<MetricsReport<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossval: Option<CrossValidation>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub metrics: ExperimentMetrics,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> std::io::Result<String> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)? + "\n";
    fs::write(path, &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

struct Stages<'a> {
    dir: &'a Path,
}

impl Stages<'_> {
    fn run<T, E: std::fmt::Display>(
        &self,
        stage: &'static str,
        f: impl FnOnce() -> Result<T, E>,
    ) -> Result<T, ExperimentError> {
        fs::write(
            self.dir.join(INCOMPLETE_MARKER),
            format!("stage: {stage}\n"),
        )?;
        f().map_err(|e| {
            let message = e.to_string();
            let _ = fs::write(
                self.dir.join(INCOMPLETE_MARKER),
                format!("stage: {stage}\nerror: {message}\n"),
            );
            ExperimentError::Stage { stage, message }
        })
    }
}

fn examples_for<'a>(
    cache: &'a HashMap<String, usize>,
    all: &'a [Example<f32>],
    ids: &[String],
) -> Vec<Example<f32>> {
    ids.iter()
        .filter_map(|id| cache.get(id).map(|&i| all[i].clone()))
        .collect()
}

fn score_multilabel(
    model: &TrainedModel<f32>,
    examples: &[Example<f32>],
) -> Result<MetricsReport<f64>, String> {
    let probs = predict_probabilities(model, examples);
    let preds = probs
        .iter()
        .map(|p| model.decide(p).map(Decision::labels))
        .collect::<Result<Vec<LabelSet>, _>>()
        .map_err(|e| e.to_string())?;
    let gold: Vec<LabelSet> = examples.iter().map(|e| e.gold).collect();
    evaluate(&gold, &preds).map_err(|e| e.to_string())
}

fn score_binary(
    model: &TrainedModel<f32>,
    examples: &[Example<f32>],
) -> Result<MetricsReport<f64>, String> {
    let probs = predict_probabilities(model, examples);
    let preds = probs
        .iter()
        .map(|p| model.decide(p).map(Decision::has_sdoh))
        .collect::<Result<Vec<bool>, _>>()
        .map_err(|e| e.to_string())?;
    let gold: Vec<bool> = examples.iter().map(|e| !e.gold.is_empty()).collect();
    evaluate_binary(&gold, &preds).map_err(|e| e.to_string())
}

type Featurized = (Featurizer, Vec<Example<f32>>, HashMap<String, usize>);
type BenchTarget<'a> = (String, Box<dyn Fn(&str) -> Result<(), String> + Sync + 'a>);

/// Featurized examples for every record, and an id → position index.
fn featurize_all(
    model: &ModelConfig,
    annotations: &AnnotationSettings,
    corpus: &Corpus,
) -> Result<Featurized, String> {
    let featurizer = featurizer_for(model, annotations).map_err(|e| e.to_string())?;
    let records: Vec<&SentenceRecord> = corpus.records().iter().collect();
    let examples = build_examples(model, &featurizer, &records).map_err(|e| e.to_string())?;
    let index = corpus
        .ids()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    Ok((featurizer, examples, index))
}

fn crossval_examples(
    corpus: &Corpus,
    plan: &FoldPlan,
    stage: &StageConfig,
    examples: &[Example<f32>],
    index: &HashMap<String, usize>,
) -> Result<CrossValidation, String> {
    crossval(plan, |fold| -> Result<MetricsReport<f64>, String> {
        // checkpoint validation is one fold's worth of the training folds
        let keep = if plan.k > 2 {
            (plan.k as f64 - 2.0) / (plan.k as f64 - 1.0)
        } else {
            0.5
        };
        let seed = derive_seed(plan.seed, (fold.repeat * plan.k + fold.fold) as u64 + 1_000);
        let (tr_ids, va_ids) =
            stratified_two_way(corpus, &fold.train, keep, seed).map_err(|e| e.to_string())?;
        let tr = examples_for(index, examples, &tr_ids);
        let va = examples_for(index, examples, &va_ids);
        let m = fit(&stage.model, &stage.train, &tr, &va).map_err(|e| e.to_string())?;
        let held_out = examples_for(index, examples, &fold.held_out);
        match stage.model.variant {
            Variant::Multilabel => score_multilabel(&m, &held_out),
            Variant::Binary => score_binary(&m, &held_out),
        }
    })
    .map_err(|e| e.to_string())
}

/// Trains and scores one model per (repeat, fold) of `plan`. Each fold's
/// training ids are split again, stratified, to carve a checkpoint
/// validation set the size of one fold.
pub fn cross_validate(
    corpus: &Corpus,
    plan: &FoldPlan,
    stage: &StageConfig,
    annotations: &AnnotationSettings,
) -> Result<CrossValidation, String> {
    stage.model.validate().map_err(|e| e.to_string())?;
    stage.train.validate().map_err(|e| e.to_string())?;
    let (_, examples, index) = featurize_all(&stage.model, annotations, corpus)?;
    crossval_examples(corpus, plan, stage, &examples, &index)
}

/// Runs split → train → evaluate (plus the optional binary, cascade, LLM,
/// cross-validation, benchmark and ablation stages) into `cfg.output_dir`.
///
/// The directory holds an `INCOMPLETE` marker naming the current stage until
/// the run finishes; a failed run leaves it in place with the error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    for sub in ["models", "metrics", "tables", "predictions", "latency"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let stages = Stages { dir: &dir };
    stages.run("config", || {
        fs::write(dir.join("config.json"), cfg.to_json() + "\n")
    })?;
    stages.run("templates", || {
        write_json(
            &dir.join("templates.json"),
            &serde_json::json!({
                "few_shot_sha256": PromptTemplate::few_shot().sha256(),
                "train_sha256": PromptTemplate::train().sha256(),
            }),
        )
    })?;

    let corpus = stages.run("corpus", || -> Result<Corpus, String> {
        let corpus = load_corpora(&cfg.corpora).map_err(|e| e.to_string())?;
        let mut merged = Vec::new();
        corpus.write_jsonl(&mut merged).map_err(|e| e.to_string())?;
        let files = cfg
            .corpora
            .iter()
            .map(|s| {
                Ok(CorpusFile {
                    path: s.path.clone(),
                    sha256: sha256_hex(&fs::read(&s.path)?),
                })
            })
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let manifest = CorpusManifest {
            files,
            records: corpus.len(),
            merged_sha256: sha256_hex(&merged),
        };
        write_json(&dir.join("corpus_manifest.json"), &manifest).map_err(|e| e.to_string())?;
        let stats = corpus_stats(&corpus);
        fs::write(dir.join("tables/stats.csv"), stats.to_csv()).map_err(|e| e.to_string())?;
        fs::write(dir.join("tables/stats.txt"), stats.to_table()).map_err(|e| e.to_string())?;
        Ok(corpus)
    })?;
    let corpus_sha256 = {
        let mut buf = Vec::new();
        corpus
            .write_jsonl(&mut buf)
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        sha256_hex(&buf)
    };

    let split = stages.run("split", || -> Result<SplitSpec, String> {
        let split = stratified_split(&corpus, cfg.split.fractions, cfg.split.seed)
            .map_err(|e| e.to_string())?;
        split
            .save(dir.join("split.json"))
            .map_err(|e| e.to_string())?;
        Ok(split)
    })?;
    let split_sha256 = sha256_hex(split.to_json().as_bytes());

    // multilabel
    let ml = &cfg.multilabel;
    let (ml_featurizer, ml_examples, ml_index) = stages.run("features", || {
        featurize_all(&ml.model, &cfg.annotations, &corpus)
    })?;
    let ml_model = stages.run("train_multilabel", || {
        let tr = examples_for(&ml_index, &ml_examples, &split.train);
        let va = examples_for(&ml_index, &ml_examples, &split.validation);
        let m = fit(&ml.model, &ml.train, &tr, &va).map_err(|e| e.to_string())?;
        export_model(&m, dir.join("models/multilabel")).map_err(|e| e.to_string())?;
        Ok::<_, String>(m)
    })?;
    let ml_report = stages.run("eval_multilabel", || {
        let te = examples_for(&ml_index, &ml_examples, &split.test);
        let r = score_multilabel(&ml_model, &te)?;
        fs::write(dir.join("metrics/multilabel.json"), r.to_json() + "\n")
            .map_err(|e| e.to_string())?;
        fs::write(dir.join("tables/multilabel.csv"), r.to_csv()).map_err(|e| e.to_string())?;
        fs::write(dir.join("tables/multilabel.txt"), r.to_table()).map_err(|e| e.to_string())?;
        Ok::<_, String>(r)
    })?;

    let mut metrics = ExperimentMetrics {
        name: cfg.name.clone(),
        corpus_sha256,
        split_sha256,
        multilabel_selected_epoch: ml_model.selected_epoch,
        multilabel: ml_report,
        binary_selected_epoch: None,
        binary: None,
        cascade: None,
        llm: None,
        crossval: None,
    };

    let llm = match &cfg.llm {
        Some(s) => Some(stages.run("llm_client", || build_llm(s))?),
        None => None,
    };

    let ml_backend = ModelBackend::new(
        ml_model.clone(),
        featurizer_for(&ml.model, &cfg.annotations).map_err(|e| ExperimentError::Stage {
            stage: "features",
            message: e.to_string(),
        })?,
    )
    .map_err(|e| ExperimentError::Stage {
        stage: "features",
        message: e.to_string(),
    })?;
    drop(ml_featurizer);

    let mut gate_holder = None;
    if let Some(bin) = &cfg.binary {
        let (bin_featurizer, bin_examples, bin_index) = stages.run("features_binary", || {
            featurize_all(&bin.model, &cfg.annotations, &corpus)
        })?;
        let bin_model = stages.run("train_binary", || {
            let tr = examples_for(&bin_index, &bin_examples, &split.train);
            let va = examples_for(&bin_index, &bin_examples, &split.validation);
            let m = fit(&bin.model, &bin.train, &tr, &va).map_err(|e| e.to_string())?;
            export_model(&m, dir.join("models/binary")).map_err(|e| e.to_string())?;
            Ok::<_, String>(m)
        })?;
        let bin_report = stages.run("eval_binary", || {
            let te = examples_for(&bin_index, &bin_examples, &split.test);
            let r = score_binary(&bin_model, &te)?;
            fs::write(dir.join("metrics/binary.json"), r.to_json() + "\n")
                .map_err(|e| e.to_string())?;
            fs::write(dir.join("tables/binary.txt"), r.to_table()).map_err(|e| e.to_string())?;
            Ok::<_, String>(r)
        })?;
        metrics.binary_selected_epoch = Some(bin_model.selected_epoch);
        metrics.binary = Some(bin_report);
        gate_holder = Some(ModelGate::new(bin_model, bin_featurizer).map_err(|e| {
            ExperimentError::Stage {
                stage: "eval_cascade",
                message: e.to_string(),
            }
        })?);
    }

    if let Some(gate) = &gate_holder {
        let backend: &dyn MultilabelBackend = match (cfg.cascade_backend, &llm) {
            (CascadeBackendKind::Llm, Some(l)) => l,
            _ => &ml_backend,
        };
        let report = stages.run("eval_cascade", || {
            let mut cascade = Cascade::new(gate, backend);
            cascade.fallback_policy = cfg.fallback;
            cascade.fallback_backend = Some(&ml_backend);
            cascade.max_in_flight = cfg.llm.as_ref().map_or(1, |l| l.max_in_flight);
            let r = evaluate_cascade(&cascade, &corpus, &split).map_err(|e| e.to_string())?;
            fs::write(dir.join("metrics/cascade.json"), r.metrics.to_json() + "\n")
                .map_err(|e| e.to_string())?;
            fs::write(dir.join("tables/cascade.txt"), r.metrics.to_table())
                .map_err(|e| e.to_string())?;
            let mut lines = String::new();
            for p in &r.predictions {
                lines += &serde_json::to_string(p).map_err(|e| e.to_string())?;
                lines.push('\n');
            }
            fs::write(dir.join("predictions/cascade.jsonl"), lines).map_err(|e| e.to_string())?;
            write_json(&dir.join("latency/cascade.json"), &r.latency).map_err(|e| e.to_string())?;
            Ok::<_, String>(r.metrics)
        })?;
        metrics.cascade = Some(report);
    }

    if let Some(l) = &llm {
        let report = stages.run("eval_llm", || {
            let test: Vec<&SentenceRecord> = corpus.select(&split.test);
            let items: Vec<(String, String)> = test
                .iter()
                .map(|r| (r.id.clone(), r.text.clone()))
                .collect();
            let preds = l
                .classify_batch(&items)
                .into_iter()
                .map(|c| {
                    c.result
                        .map(|p| p.labels)
                        .map_err(|e| format!("{}: {e}", c.id))
                })
                .collect::<Result<Vec<LabelSet>, String>>()?;
            let gold: Vec<LabelSet> = test.iter().map(|r| r.gold).collect();
            let r: MetricsReport<f64> = evaluate(&gold, &preds).map_err(|e| e.to_string())?;
            fs::write(dir.join("metrics/llm.json"), r.to_json() + "\n")
                .map_err(|e| e.to_string())?;
            fs::write(dir.join("tables/llm.txt"), r.to_table()).map_err(|e| e.to_string())?;
            Ok::<_, String>(r)
        })?;
        metrics.llm = Some(report);
    }

    if let Some(cv) = &cfg.crossval {
        let result = stages.run("crossval", || {
            let plan =
                make_fold_plan(&corpus, cv.k, cv.repeats, cv.seed).map_err(|e| e.to_string())?;
            plan.save(dir.join("foldplan.json"))
                .map_err(|e| e.to_string())?;
            let result = match (cv.variant, &cfg.binary) {
                (Variant::Binary, Some(bin)) => {
                    cross_validate(&corpus, &plan, bin, &cfg.annotations)?
                }
                (Variant::Binary, None) => {
                    return Err("crossval.variant = binary needs a `binary` stage".into())
                }
                (Variant::Multilabel, _) => {
                    crossval_examples(&corpus, &plan, ml, &ml_examples, &ml_index)?
                }
            };
            fs::write(dir.join("metrics/crossval.json"), result.to_json() + "\n")
                .map_err(|e| e.to_string())?;
            Ok::<_, String>(result)
        })?;
        metrics.crossval = Some(result);
    }

    if let Some(b) = &cfg.bench {
        let mut bench_targets: Vec<BenchTarget<'_>> = Vec::new();
        bench_targets.push((
            "traditional_multilabel".into(),
            Box::new(|t: &str| {
                ml_backend
                    .predict("", t)
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            }),
        ));
        if let Some(gate) = &gate_holder {
            bench_targets.push((
                "binary".into(),
                Box::new(move |t: &str| {
                    crate::twostep::BinaryGate::is_positive(gate, "", t).map(|_| ())
                }),
            ));
            let backend: &dyn MultilabelBackend = match (cfg.cascade_backend, &llm) {
                (CascadeBackendKind::Llm, Some(l)) => l,
                _ => &ml_backend,
            };
            bench_targets.push((
                "cascade".into(),
                Box::new(move |t: &str| {
                    Cascade::new(gate, backend)
                        .route("", t)
                        .map(|_| ())
                        .map_err(|e| e.to_string())
                }),
            ));
        }
        if let Some(l) = &llm {
            bench_targets.push((
                "llm".into(),
                Box::new(move |t: &str| l.classify(t).map(|_| ()).map_err(|e| e.to_string())),
            ));
        }
        stages.run("bench", || -> Result<(), String> {
            let sentences: Vec<String> = corpus
                .select(&split.test)
                .iter()
                .take(b.max_sentences.max(1))
                .map(|r| r.text.clone())
                .collect();
            let mut reports: Vec<LatencyReport> = Vec::new();
            for (id, f) in &bench_targets {
                let r = bench(id, |t: &str| f(t), &sentences, b.warmup, b.repeats)
                    .map_err(|e| e.to_string())?;
                r.save(dir.join(format!("latency/bench_{id}.json")))
                    .map_err(|e| e.to_string())?;
                reports.push(r);
            }
            Ok(())
        })?;
    }

    if !cfg.ablation.is_empty() {
        stages.run("ablation", || {
            run_ablation(cfg, &corpus, &split, &dir.join("ablation")).map(|_| ())
        })?;
    }

    stages.run("report", || -> Result<(), String> {
        let hash = write_json(&dir.join("metrics.json"), &metrics).map_err(|e| e.to_string())?;
        fs::write(dir.join("summary.md"), summary_table(&metrics, &hash))
            .map_err(|e| e.to_string())?;
        Ok(())
    })?;
    fs::remove_file(dir.join(INCOMPLETE_MARKER))?;
    Ok(ExperimentOutcome { dir, metrics })
}

/// Reruns the experiment recorded in `dir/config.json`.
pub fn rerun_experiment(dir: impl AsRef<Path>) -> Result<ExperimentOutcome, ExperimentError> {
    run_experiment(&ExperimentConfig::load(dir.as_ref().join("config.json"))?)
}

fn summary_table(m: &ExperimentMetrics, metrics_sha256: &str) -> String {
    let mut out = format!(
        "# {}\n\nmetrics.json sha256 `{metrics_sha256}`; corpus `{}`; split `{}`\n\n",
        m.name, m.corpus_sha256, m.split_sha256
    );
    out += "| classifier | micro P | micro R | micro F1 | macro P | macro R | macro F1 | weighted P | weighted R | weighted F1 |\n";
    out += "|---|---|---|---|---|---|---|---|---|---|\n";
    let mut row = |name: &str, r: &MetricsReport<f64>| {
        let cell = |a: &crate::metrics::Averaged<f64>| {
            format!(
                "{:.4} | {:.4} | {:.4}",
                a.scores.precision, a.scores.recall, a.scores.f1
            )
        };
        out += &format!(
            "| {name} | {} | {} | {} |\n",
            cell(&r.micro),
            cell(&r.macro_),
            cell(&r.weighted)
        );
    };
    row("traditional_multilabel", &m.multilabel);
    if let Some(r) = &m.binary {
        row("binary", r);
    }
    if let Some(r) = &m.cascade {
        row("cascade", r);
    }
    if let Some(r) = &m.llm {
        row("llm", r);
    }
    if let Some(cv) = &m.crossval {
        let s = &cv.summary;
        out += &format!(
            "\ncross-validation over {} evaluations: macro F1 {:.4} ± {:.4}, weighted F1 {:.4} ± {:.4}\n",
            s.evaluations, s.mean.macro_.f1, s.std.macro_.f1, s.mean.weighted.f1, s.std.weighted.f1
        );
    }
    out
}

/// Cascade latency from routed predictions; re-exported for the CLI.
pub fn cascade_latency(preds: &[crate::twostep::RoutedPrediction]) -> CascadeLatency {
    CascadeLatency::from_predictions(preds)
}
