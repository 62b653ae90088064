use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sdoh::bench::{bench, speedup, LatencyReport};
use sdoh::dataset::{corpus_stats, load_corpus, Corpus, Source};
use sdoh::experiment::{
    cross_validate, featurizer_for, load_corpora, run_ablation, run_experiment, AnnotationSettings,
    ExperimentConfig, StageConfig,
};
use sdoh::label::LabelSet;
use sdoh::llm::{
    export_finetune_data, HttpClient, LlmClassifier, LoraConfig, PromptTemplate, TemplateKind,
    ENDPOINT_ENV, TOKEN_ENV,
};
use sdoh::metrics::{evaluate, evaluate_binary, MetricsReport};
use sdoh::model::{
    build_examples, export_model, import_model, predict_probabilities, train, tune_thresholds,
    Decision, Variant,
};
use sdoh::stratify::{make_fold_plan, stratified_split, FoldPlan, SplitSpec};
use sdoh::twostep::{
    Cascade, CascadeLatency, FallbackPolicy, ModelBackend, ModelGate, MultilabelBackend,
};
use sdoh::Model;

#[derive(Parser)]
#[command(
    name = "sdoh",
    version,
    about = "Sentence-level SDoH classification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct AnnotationArgs {
    /// JSONL annotation sidecar keyed by record id
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// JSON concept lexicon replacing the built-in one
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl AnnotationArgs {
    fn settings(&self) -> AnnotationSettings {
        AnnotationSettings {
            sidecar: self.sidecar.clone(),
            lexicon: self.lexicon.clone(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsFormat {
    Table,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaKind {
    Experiment,
    Stage,
    Features,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fallback {
    Error,
    EmptyLabels,
    Traditional,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSONL corpus and rewrite it in canonical form
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Tag every record with this source (base or synthetic)
        #[arg(long)]
        source: Option<Source>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-label counts
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: StatsFormat,
    },
    /// Stratified train/validation/test split
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.6,0.2,0.2")]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated stratified k-fold plan
    Foldplan {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its bundle
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        variant: Variant,
        /// JSON with `model` and `train` sections; defaults per variant when absent
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        annotations: AnnotationArgs,
    },
    /// Predict JSONL records ({"id", "text"}) with a model bundle
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        annotations: AnnotationArgs,
    },
    /// Score predictions against gold labels
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
        /// Score SDoH presence instead of labels
        #[arg(long)]
        binary: bool,
    },
    /// Route records through a binary gate and a multilabel backend
    PredictCascade {
        /// Binary model bundle
        #[arg(long)]
        gate: PathBuf,
        /// `traditional:<model-dir>` or `llm:<endpoint>` (`llm:` reads the endpoint variable)
        #[arg(long)]
        backend: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "error")]
        fallback: Fallback,
        /// Multilabel bundle used by `--fallback traditional`
        #[arg(long)]
        fallback_model: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_in_flight: usize,
        /// Prompt template file for an LLM backend
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        timeout_seconds: u64,
        /// Write latency totals here
        #[arg(long)]
        latency_out: Option<PathBuf>,
        #[command(flatten)]
        annotations: AnnotationArgs,
    },
    /// Train and score one model per fold of a plan
    Crossval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        foldplan: PathBuf,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        annotations: AnnotationArgs,
    },
    /// Measure sentences per second of a classifier
    Bench {
        /// `model:<dir>`, `cascade:<gate-dir>,<backend-dir>`, `llm:<endpoint>` or `sleep:<ms>`
        #[arg(long)]
        classifier: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        annotations: AnnotationArgs,
    },
    /// Throughput ratio of two benchmark reports on the same workload
    Speedup {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Feature-set sweep using an experiment config's split and training settings
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Feature sets such as `none`, `pos+dep`, `all`; defaults to the config's list
        #[arg(long, value_delimiter = ',')]
        feature_sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write rendered fine-tuning prompts for the train split
    ExportFinetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train template file; the shipped one is used when absent
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        rank: u32,
        #[arg(long, default_value_t = 5e-5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0.10)]
        dropout: f64,
        #[arg(long, default_value_t = 3)]
        epochs: u32,
        /// Skip records without SDoH instead of rendering them with `-`
        #[arg(long)]
        skip_negative: bool,
    },
    /// Tune per-output thresholds on the validation split and write a new bundle
    TuneThresholds {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        annotations: AnnotationArgs,
    },
    /// Run a whole experiment from its config
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the JSON schema of a config file
    Schema {
        #[arg(long, value_enum, default_value = "experiment")]
        kind: SchemaKind,
    },
}

#[derive(Deserialize)]
struct InputLine {
    id: String,
    text: String,
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<LabelSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    has_sdoh: Option<bool>,
    probabilities: &'a [f64],
}

fn read_inputs(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InputLine =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push((rec.id, rec.text));
    }
    Ok(out)
}

fn load_model(dir: &Path) -> Result<Model> {
    import_model(dir).with_context(|| format!("loading model bundle {}", dir.display()))
}

fn load_stage(config: Option<&Path>, variant: Variant) -> Result<StageConfig> {
    let stage = match config {
        Some(p) => serde_json::from_str::<StageConfig>(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => StageConfig::new(variant),
    };
    if stage.model.variant != variant {
        bail!(
            "config is for the {} variant but --variant is {variant}",
            stage.model.variant
        );
    }
    Ok(stage)
}

fn write_lines<S: Serialize>(path: &Path, items: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn llm_classifier(
    endpoint: &str,
    template: Option<&Path>,
    max_in_flight: usize,
    timeout: u64,
) -> Result<LlmClassifier> {
    let endpoint = if endpoint.is_empty() {
        std::env::var(ENDPOINT_ENV)
            .map_err(|_| anyhow!("no endpoint given and {ENDPOINT_ENV} is unset"))?
    } else {
        endpoint.to_string()
    };
    let template = match template {
        Some(p) => PromptTemplate::load(TemplateKind::FewShot, p)?,
        None => PromptTemplate::few_shot(),
    };
    let client = HttpClient::new(
        endpoint,
        std::env::var(TOKEN_ENV).ok(),
        Duration::from_secs(timeout),
    );
    let mut c = LlmClassifier::new(Arc::new(client), template);
    c.max_in_flight = max_in_flight.max(1);
    Ok(c)
}

fn print_report(r: &MetricsReport<f64>, format: ReportFormat) {
    match format {
        ReportFormat::Json => println!("{}", r.to_json()),
        ReportFormat::Csv => print!("{}", r.to_csv()),
        ReportFormat::Table => print!("{}", r.to_table()),
    }
}

fn eval(gold: &Path, pred: &Path, format: ReportFormat, binary: bool) -> Result<()> {
    let corpus = load_corpus(gold, None)?;
    let file = File::open(pred).with_context(|| format!("opening {}", pred.display()))?;
    let mut g = Vec::new();
    let mut p = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", pred.display(), i + 1))?;
        let id = v["id"]
            .as_str()
            .ok_or_else(|| anyhow!("{}:{}: missing `id`", pred.display(), i + 1))?;
        let rec = corpus
            .get(id)
            .ok_or_else(|| anyhow!("prediction for unknown id `{id}`"))?;
        let labels: Option<LabelSet> = match v.get("labels") {
            Some(l) => Some(
                serde_json::from_value(l.clone()).with_context(|| format!("labels of `{id}`"))?,
            ),
            None => None,
        };
        let present = match (v.get("has_sdoh").and_then(|b| b.as_bool()), labels) {
            (Some(b), _) => b,
            (None, Some(l)) => !l.is_empty(),
            (None, None) => bail!("prediction `{id}` has neither `labels` nor `has_sdoh`"),
        };
        if binary {
            p.push(LabelSet::from_bits(present as u8).expect("bit 0 is a label"));
            g.push(LabelSet::from_bits(!rec.gold.is_empty() as u8).expect("bit 0 is a label"));
        } else {
            p.push(labels.ok_or_else(|| anyhow!("prediction `{id}` has no `labels`"))?);
            g.push(rec.gold);
        }
    }
    let report: MetricsReport<f64> = if binary {
        let gb: Vec<bool> = g.iter().map(|l| !l.is_empty()).collect();
        let pb: Vec<bool> = p.iter().map(|l| !l.is_empty()).collect();
        evaluate_binary(&gb, &pb)?
    } else {
        evaluate(&g, &p)?
    };
    print_report(&report, format);
    Ok(())
}

type ClassifyFn = Box<dyn Fn(&str) -> Result<(), String>>;

fn classifier_fn(spec: &str, annotations: &AnnotationSettings) -> Result<ClassifyFn> {
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| anyhow!("classifier spec `{spec}` has no `kind:` prefix"))?;
    Ok(match kind {
        "sleep" => {
            let ms: u64 = arg
                .parse()
                .with_context(|| format!("sleep duration `{arg}`"))?;
            Box::new(move |_| {
                std::thread::sleep(Duration::from_millis(ms));
                Ok(())
            })
        }
        "model" => {
            let m = load_model(Path::new(arg))?;
            let f = featurizer_for(&m.config, annotations)?;
            Box::new(move |t| {
                m.predict_text(&f, None, t)
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            })
        }
        "cascade" => {
            let (g, b) = arg
                .split_once(',')
                .ok_or_else(|| anyhow!("cascade spec needs `<gate-dir>,<backend-dir>`"))?;
            let gm = load_model(Path::new(g))?;
            let bm = load_model(Path::new(b))?;
            let gate = ModelGate::new(gm.clone(), featurizer_for(&gm.config, annotations)?)?;
            let backend = ModelBackend::new(bm.clone(), featurizer_for(&bm.config, annotations)?)?;
            Box::new(move |t| {
                Cascade::new(&gate, &backend)
                    .route("", t)
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            })
        }
        "llm" => {
            let c = llm_classifier(arg, None, 1, 60)?;
            Box::new(move |t| c.classify(t).map(|_| ()).map_err(|e| e.to_string()))
        }
        other => bail!("unknown classifier kind `{other}` (expected model, cascade, llm or sleep)"),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { input, source, out } => {
            let corpus = load_corpus(&input, source)?;
            corpus.save(&out)?;
            eprintln!("{} records written to {}", corpus.len(), out.display());
        }
        Command::Stats { corpus, format } => {
            let stats = corpus_stats(&load_corpus(&corpus, None)?);
            match format {
                StatsFormat::Table => print!("{}", stats.to_table()),
                StatsFormat::Csv => print!("{}", stats.to_csv()),
            }
        }
        Command::Split {
            corpus,
            fractions,
            seed,
            out,
        } => {
            let fractions: [f64; 3] = fractions
                .try_into()
                .map_err(|v: Vec<f64>| anyhow!("expected 3 fractions, got {}", v.len()))?;
            let split = stratified_split(&load_corpus(&corpus, None)?, fractions, seed)?;
            split.save(&out)?;
            eprintln!(
                "train {} / validation {} / test {}",
                split.train.len(),
                split.validation.len(),
                split.test.len()
            );
        }
        Command::Foldplan {
            corpus,
            k,
            repeats,
            seed,
            out,
        } => {
            let plan = make_fold_plan(&load_corpus(&corpus, None)?, k, repeats, seed)?;
            plan.save(&out)?;
            eprintln!("{} evaluations", plan.evaluations());
        }
        Command::Train {
            corpus,
            split,
            variant,
            config,
            out,
            annotations,
        } => {
            let stage = load_stage(config.as_deref(), variant)?;
            let corpus = load_corpus(&corpus, None)?;
            let split = SplitSpec::load(&split)?;
            let featurizer = featurizer_for(&stage.model, &annotations.settings())?;
            let m: Model = train(&corpus, &split, &featurizer, &stage.model, &stage.train)?;
            export_model(&m, &out)?;
            eprintln!(
                "selected epoch {}; bundle written to {}",
                m.selected_epoch,
                out.display()
            );
        }
        Command::Predict {
            model,
            input,
            out,
            annotations,
        } => {
            let m = load_model(&model)?;
            let featurizer = featurizer_for(&m.config, &annotations.settings())?;
            let mut lines = Vec::new();
            for (id, text) in read_inputs(&input)? {
                let (probs, d) = m.predict_text(&featurizer, Some(&id), &text)?;
                lines.push((id, probs, d));
            }
            write_lines(
                &out,
                lines.iter().map(|(id, probs, d)| PredictionLine {
                    id,
                    labels: matches!(d, Decision::Labels(_)).then(|| d.labels()),
                    has_sdoh: matches!(d, Decision::Presence(_)).then(|| d.has_sdoh()),
                    probabilities: probs,
                }),
            )?;
        }
        Command::Eval {
            gold,
            pred,
            format,
            binary,
        } => eval(&gold, &pred, format, binary)?,
        Command::PredictCascade {
            gate,
            backend,
            input,
            out,
            fallback,
            fallback_model,
            max_in_flight,
            template,
            timeout_seconds,
            latency_out,
            annotations,
        } => {
            let ann = annotations.settings();
            let gm = load_model(&gate)?;
            let gate = ModelGate::new(gm.clone(), featurizer_for(&gm.config, &ann)?)?;
            let (kind, arg) = backend.split_once(':').ok_or_else(|| {
                anyhow!("backend `{backend}` must be traditional:<dir> or llm:<endpoint>")
            })?;
            let backend: Box<dyn MultilabelBackend> = match kind {
                "traditional" => {
                    let bm = load_model(Path::new(arg))?;
                    Box::new(ModelBackend::new(
                        bm.clone(),
                        featurizer_for(&bm.config, &ann)?,
                    )?)
                }
                "llm" => Box::new(llm_classifier(
                    arg,
                    template.as_deref(),
                    max_in_flight,
                    timeout_seconds,
                )?),
                other => bail!("unknown backend kind `{other}`"),
            };
            let fallback_backend = match &fallback_model {
                Some(dir) => {
                    let fm = load_model(dir)?;
                    Some(ModelBackend::new(
                        fm.clone(),
                        featurizer_for(&fm.config, &ann)?,
                    )?)
                }
                None => None,
            };
            let mut cascade = Cascade::new(&gate, backend.as_ref());
            cascade.max_in_flight = max_in_flight.max(1);
            cascade.fallback_policy = match fallback {
                Fallback::Error => FallbackPolicy::Error,
                Fallback::EmptyLabels => FallbackPolicy::EmptyLabels,
                Fallback::Traditional => FallbackPolicy::Traditional,
            };
            cascade.fallback_backend = fallback_backend
                .as_ref()
                .map(|b| b as &dyn MultilabelBackend);
            if matches!(fallback, Fallback::Traditional) && cascade.fallback_backend.is_none() {
                bail!("--fallback traditional needs --fallback-model");
            }
            let preds = cascade
                .route_batch(&read_inputs(&input)?)
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            write_lines(&out, &preds)?;
            let latency = CascadeLatency::from_predictions(&preds);
            eprintln!(
                "{} sentences, {} backend calls, {:.1} sentences/s",
                latency.n_sentences, latency.backend_calls, latency.sentences_per_second
            );
            if let Some(p) = latency_out {
                fs::write(p, serde_json::to_string_pretty(&latency)? + "\n")?;
            }
        }
        Command::Crossval {
            corpus,
            foldplan,
            variant,
            config,
            out,
            annotations,
        } => {
            let stage = load_stage(config.as_deref(), variant)?;
            let corpus = load_corpus(&corpus, None)?;
            let plan = FoldPlan::load(&foldplan)?;
            let result = cross_validate(&corpus, &plan, &stage, &annotations.settings())
                .map_err(|e| anyhow!(e))?;
            fs::write(&out, result.to_json() + "\n")?;
            let s = &result.summary;
            println!(
                "{} evaluations: macro F1 {:.4} ± {:.4}, weighted F1 {:.4} ± {:.4}",
                s.evaluations,
                s.mean.macro_.f1,
                s.std.macro_.f1,
                s.mean.weighted.f1,
                s.std.weighted.f1
            );
        }
        Command::Bench {
            classifier,
            input,
            warmup,
            repeats,
            out,
            annotations,
        } => {
            let sentences: Vec<String> = read_inputs(&input)?.into_iter().map(|(_, t)| t).collect();
            let f = classifier_fn(&classifier, &annotations.settings())?;
            let report = bench(&classifier, |t: &str| f(t), &sentences, warmup, repeats)?;
            report.save(&out)?;
            println!(
                "{}: {:.2} sentences/s (p50 {:.4}s, noise bound {:.0}%)",
                report.classifier_id,
                report.sentences_per_second,
                report.per_sentence_quantiles.p50,
                report.noise_bound * 100.0
            );
        }
        Command::Speedup { a, b } => {
            let (ra, rb) = (LatencyReport::load(&a)?, LatencyReport::load(&b)?);
            let s = speedup(&ra, &rb)?;
            println!(
                "{} is {s:.2}x the throughput of {}",
                ra.classifier_id, rb.classifier_id
            );
        }
        Command::Ablate {
            config,
            feature_sets,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if !feature_sets.is_empty() {
                cfg.ablation = feature_sets;
            }
            if cfg.ablation.is_empty() {
                bail!("no feature sets given and the config lists none");
            }
            cfg.validate()?;
            let corpus: Corpus = load_corpora(&cfg.corpora)?;
            let split = stratified_split(&corpus, cfg.split.fractions, cfg.split.seed)?;
            let outcome = run_ablation(&cfg, &corpus, &split, &out).map_err(|e| anyhow!(e))?;
            for t in &outcome.tests {
                println!(
                    "{}: test macro F1 {:.4} (epoch {})",
                    t.feature_set, t.test_macro_f1, t.selected_epoch
                );
            }
            for (set, err) in &outcome.failures {
                eprintln!("{set}: failed: {err}");
            }
        }
        Command::ExportFinetune {
            corpus,
            split,
            out,
            template,
            rank,
            learning_rate,
            dropout,
            epochs,
            skip_negative,
        } => {
            let template = match template {
                Some(p) => PromptTemplate::load(TemplateKind::Train, p)?,
                None => PromptTemplate::train(),
            };
            let lora = LoraConfig {
                rank,
                learning_rate,
                dropout,
                epochs,
            };
            let manifest = export_finetune_data(
                &load_corpus(&corpus, None)?,
                &SplitSpec::load(&split)?,
                &template,
                lora,
                !skip_negative,
                &out,
            )?;
            eprintln!("{} prompts written to {}", manifest.records, out.display());
        }
        Command::TuneThresholds {
            model,
            corpus,
            split,
            out,
            annotations,
        } => {
            let mut m = load_model(&model)?;
            let corpus = load_corpus(&corpus, None)?;
            let split = SplitSpec::load(&split)?;
            let featurizer = featurizer_for(&m.config, &annotations.settings())?;
            let records = corpus.select(&split.validation);
            let examples = build_examples(&m.config, &featurizer, &records)?;
            let probs = predict_probabilities(&m, &examples);
            let targets: Vec<Vec<bool>> = examples
                .iter()
                .map(|e| e.target.iter().map(|t| *t > 0.5).collect())
                .collect();
            m.config.thresholds = tune_thresholds(&probs, &targets);
            export_model(&m, &out)?;
            println!("thresholds {:?}", m.config.thresholds);
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run_experiment(&cfg)?;
            print!("{}", fs::read_to_string(outcome.dir.join("summary.md"))?);
        }
        Command::Schema { kind } => {
            let schema = match kind {
                SchemaKind::Experiment => ExperimentConfig::schema(),
                SchemaKind::Stage => {
                    serde_json::to_string_pretty(&schemars::schema_for!(StageConfig))?
                }
                SchemaKind::Features => serde_json::to_string_pretty(&schemars::schema_for!(
                    sdoh::features::FeatureConfig
                ))?,
            };
            println!("{schema}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
