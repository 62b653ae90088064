use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdoh::experiment::StageConfig;
use sdoh::model::Variant;
use serde_json::{json, Value};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn sdoh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdoh"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sdoh(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stage(variant: &str) -> Value {
    let mut s = StageConfig::new(variant.parse::<Variant>().unwrap());
    s.model.encoder.buckets = 512;
    s.model.encoder.dim = 16;
    s.model.features.cui_dim = 8;
    s.model.conv_channels = [16, 16];
    s.train.epochs = 3;
    s.train.learning_rate = 0.01;
    s.train.batch_size = 8;
    serde_json::to_value(s).unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write_json(&self, name: &str, v: &Value) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
        path
    }

    /// Ingested corpus, split, and trained multilabel and binary bundles.
    fn trained(&self) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
        let corpus = self.path("corpus.jsonl");
        ok(&[
            "ingest",
            "--input",
            p(&fixture("tiny.jsonl")),
            "--out",
            p(&corpus),
        ]);
        let split = self.path("split.json");
        ok(&[
            "split",
            "--corpus",
            p(&corpus),
            "--seed",
            "3",
            "--out",
            p(&split),
        ]);
        let ml_cfg = self.write_json("ml.json", &stage("multilabel"));
        let bin_cfg = self.write_json("bin.json", &stage("binary"));
        let ml = self.path("ml_model");
        let bin = self.path("bin_model");
        for (variant, cfg, out) in [("multilabel", &ml_cfg, &ml), ("binary", &bin_cfg, &bin)] {
            ok(&[
                "train",
                "--corpus",
                p(&corpus),
                "--split",
                p(&split),
                "--variant",
                variant,
                "--config",
                p(cfg),
                "--out",
                p(out),
            ]);
        }
        (corpus, split, ml, bin)
    }
}

#[test]
fn ingest_stats_split_foldplan() {
    let ws = Workspace::new();
    let out = ws.path("syn.jsonl");
    ok(&[
        "ingest",
        "--input",
        p(&fixture("tiny.jsonl")),
        "--source",
        "synthetic",
        "--out",
        p(&out),
    ]);
    assert!(fs::read_to_string(&out)
        .unwrap()
        .lines()
        .all(|l| l.contains("\"synthetic\"")));

    let table = ok(&["stats", "--corpus", p(&out)]);
    assert!(table.contains("housing"));
    let csv = ok(&["stats", "--corpus", p(&out), "--format", "csv"]);
    assert!(csv.lines().count() > 1);

    let split = ws.path("split.json");
    ok(&[
        "split",
        "--corpus",
        p(&out),
        "--fractions",
        "0.6,0.2,0.2",
        "--seed",
        "9",
        "--out",
        p(&split),
    ]);
    let s: Value = serde_json::from_str(&fs::read_to_string(&split).unwrap()).unwrap();
    let n = ["train", "validation", "test"]
        .iter()
        .map(|k| s[k].as_array().unwrap().len())
        .sum::<usize>();
    assert_eq!(n, 50);

    let plan = ws.path("plan.json");
    ok(&[
        "foldplan",
        "--corpus",
        p(&out),
        "--k",
        "5",
        "--repeats",
        "2",
        "--seed",
        "1",
        "--out",
        p(&plan),
    ]);
    let f: Value = serde_json::from_str(&fs::read_to_string(&plan).unwrap()).unwrap();
    assert_eq!(f["folds"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_inputs_fail_with_messages() {
    let ws = Workspace::new();
    let bad = ws.path("bad.jsonl");
    fs::write(
        &bad,
        "{\"id\":\"a\",\"text\":\"x\",\"labels\":[\"food\"]}\n",
    )
    .unwrap();
    let out = sdoh(&["stats", "--corpus", p(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("food"));
    let out = sdoh(&[
        "split",
        "--corpus",
        p(&fixture("tiny.jsonl")),
        "--fractions",
        "0.5,0.5",
        "--out",
        p(&ws.path("s")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn train_predict_eval_cascade_bench() {
    let ws = Workspace::new();
    let (corpus, split, ml, bin) = ws.trained();
    assert!(ml.join("weights.bin").exists() && ml.join("curve.csv").exists());

    let preds = ws.path("pred.jsonl");
    ok(&[
        "predict",
        "--model",
        p(&ml),
        "--input",
        p(&corpus),
        "--out",
        p(&preds),
    ]);
    let first: Value =
        serde_json::from_str(fs::read_to_string(&preds).unwrap().lines().next().unwrap()).unwrap();
    assert!(first["labels"].is_array());
    assert_eq!(first["probabilities"].as_array().unwrap().len(), 6);

    let report: Value = serde_json::from_str(&ok(&[
        "eval",
        "--gold",
        p(&corpus),
        "--pred",
        p(&preds),
        "--format",
        "json",
    ]))
    .unwrap();
    assert_eq!(report["n_classes"], 6);
    assert!(ok(&[
        "eval",
        "--gold",
        p(&corpus),
        "--pred",
        p(&preds),
        "--format",
        "csv"
    ])
    .contains("macro"));

    let bin_preds = ws.path("bin_pred.jsonl");
    ok(&[
        "predict",
        "--model",
        p(&bin),
        "--input",
        p(&corpus),
        "--out",
        p(&bin_preds),
    ]);
    let report: Value = serde_json::from_str(&ok(&[
        "eval",
        "--gold",
        p(&corpus),
        "--pred",
        p(&bin_preds),
        "--format",
        "json",
        "--binary",
    ]))
    .unwrap();
    assert_eq!(report["n_classes"], 2);

    let routed = ws.path("routed.jsonl");
    let latency = ws.path("latency.json");
    ok(&[
        "predict-cascade",
        "--gate",
        p(&bin),
        "--backend",
        &format!("traditional:{}", p(&ml)),
        "--input",
        p(&corpus),
        "--out",
        p(&routed),
        "--latency-out",
        p(&latency),
    ]);
    let lines: Vec<Value> = fs::read_to_string(&routed)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 50);
    for l in &lines {
        if l["gate_positive"] == false {
            assert_eq!(l["labels"], json!([]));
            assert_eq!(l["backend_used"], "none");
        }
    }
    let lat: Value = serde_json::from_str(&fs::read_to_string(&latency).unwrap()).unwrap();
    let positives = lines.iter().filter(|l| l["gate_positive"] == true).count();
    assert_eq!(lat["backend_calls"], positives);

    let a = ws.path("a.json");
    let b = ws.path("b.json");
    ok(&[
        "bench",
        "--classifier",
        &format!("model:{}", p(&ml)),
        "--input",
        p(&corpus),
        "--warmup",
        "0",
        "--repeats",
        "1",
        "--out",
        p(&a),
    ]);
    ok(&[
        "bench",
        "--classifier",
        "sleep:1",
        "--input",
        p(&corpus),
        "--warmup",
        "0",
        "--repeats",
        "1",
        "--out",
        p(&b),
    ]);
    assert!(ok(&["speedup", "--a", p(&a), "--b", p(&b)]).contains("x the throughput"));
    let c = ws.path("c.json");
    ok(&[
        "bench",
        "--classifier",
        &format!("cascade:{},{}", p(&bin), p(&ml)),
        "--input",
        p(&corpus),
        "--warmup",
        "0",
        "--repeats",
        "1",
        "--out",
        p(&c),
    ]);
    let other = ws.path("other.jsonl");
    fs::write(&other, "{\"id\":\"z\",\"text\":\"different workload\"}\n").unwrap();
    let d = ws.path("d.json");
    ok(&[
        "bench",
        "--classifier",
        "sleep:0",
        "--input",
        p(&other),
        "--warmup",
        "0",
        "--repeats",
        "1",
        "--out",
        p(&d),
    ]);
    assert!(!sdoh(&["speedup", "--a", p(&a), "--b", p(&d)])
        .status
        .success());

    let tuned = ws.path("tuned");
    ok(&[
        "tune-thresholds",
        "--model",
        p(&ml),
        "--corpus",
        p(&corpus),
        "--split",
        p(&split),
        "--out",
        p(&tuned),
    ]);
    let cfg: Value =
        serde_json::from_str(&fs::read_to_string(tuned.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["thresholds"].as_array().unwrap().len(), 6);

    let out = sdoh(&[
        "predict-cascade",
        "--gate",
        p(&ml),
        "--backend",
        &format!("traditional:{}", p(&ml)),
        "--input",
        p(&corpus),
        "--out",
        p(&routed),
    ]);
    assert!(!out.status.success(), "a multilabel model is not a gate");
}

#[test]
fn export_finetune_writes_prompts() {
    let ws = Workspace::new();
    let split = ws.path("split.json");
    ok(&[
        "split",
        "--corpus",
        p(&fixture("tiny.jsonl")),
        "--out",
        p(&split),
    ]);
    let out = ws.path("ft");
    ok(&[
        "export-finetune",
        "--corpus",
        p(&fixture("tiny.jsonl")),
        "--split",
        p(&split),
        "--out",
        p(&out),
    ]);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["lora"]["rank"], 64);
    let prompts = fs::read_to_string(out.join("train.jsonl")).unwrap();
    assert_eq!(
        prompts.lines().count() as u64,
        manifest["records"].as_u64().unwrap()
    );
    let bad = sdoh(&[
        "export-finetune",
        "--corpus",
        p(&fixture("tiny.jsonl")),
        "--split",
        p(&split),
        "--out",
        p(&out),
        "--rank",
        "0",
    ]);
    assert!(!bad.status.success());
}

#[test]
fn crossval_run_and_ablate() {
    let ws = Workspace::new();
    let plan = ws.path("plan.json");
    ok(&[
        "foldplan",
        "--corpus",
        p(&fixture("tiny.jsonl")),
        "--k",
        "3",
        "--repeats",
        "1",
        "--out",
        p(&plan),
    ]);
    let cfg = ws.write_json("bin.json", &stage("binary"));
    let cv = ws.path("cv.json");
    let line = ok(&[
        "crossval",
        "--corpus",
        p(&fixture("tiny.jsonl")),
        "--foldplan",
        p(&plan),
        "--variant",
        "binary",
        "--config",
        p(&cfg),
        "--out",
        p(&cv),
    ]);
    assert!(line.starts_with("3 evaluations"));

    let exp = json!({
        "name": "cli",
        "corpora": [{"path": fixture("tiny.jsonl")}],
        "split": {"seed": 2, "fractions": [0.6, 0.2, 0.2]},
        "multilabel": stage("multilabel"),
        "output_dir": ws.path("exp"),
    });
    let exp_path = ws.write_json("exp.json", &exp);
    let summary = ok(&["run", "--config", p(&exp_path)]);
    assert!(summary.contains("traditional_multilabel"));
    assert!(ws.path("exp/metrics.json").exists());

    let abl = ws.path("abl");
    let out = ok(&[
        "ablate",
        "--config",
        p(&exp_path),
        "--feature-sets",
        "none,pos",
        "--out",
        p(&abl),
    ]);
    assert_eq!(out.lines().count(), 2);
    assert_eq!(
        fs::read_to_string(abl.join("curves.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 2 * 3
    );
    assert!(abl.join("curves.svg").exists());
}

#[test]
fn schemas_are_json() {
    for kind in ["experiment", "stage", "features"] {
        let v: Value = serde_json::from_str(&ok(&["schema", "--kind", kind])).unwrap();
        assert!(
            v.get("properties").is_some() || v.get("$defs").is_some(),
            "{kind}"
        );
    }
}
