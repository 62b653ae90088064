//! Throughput measurement for whole prediction pipelines.

use std::fmt::Display;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("benchmark needs at least one sentence and one measured repeat")]
    Empty,
    #[error("classifier failed on sentence {index}: {message}")]
    Classifier { index: usize, message: String },
    #[error("reports measured different workloads ({a} vs {b})")]
    Incomparable { a: String, b: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Where and how a report was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub package_version: String,
    pub batch_size: usize,
}

impl Fingerprint {
    pub fn current() -> Self {
        Fingerprint {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            package_version: env!("CARGO_PKG_VERSION").into(),
            batch_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub classifier_id: String,
    /// Sentences measured: workload size times repeats.
    pub n_sentences: usize,
    pub workload_sentences: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub total_seconds: f64,
    pub sentences_per_second: f64,
    pub per_sentence_quantiles: Quantiles,
    /// Throughput of each measured pass.
    pub per_repeat_sentences_per_second: Vec<f64>,
    /// Relative throughput difference two runs of the same classifier are
    /// expected to stay within.
    pub noise_bound: f64,
    pub workload_sha256: String,
    pub fingerprint: Fingerprint,
}

impl LatencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BenchError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Minimum declared noise bound.
pub const NOISE_FLOOR: f64 = 0.10;

/// Hash of the ordered sentence list; each sentence is NUL-terminated.
pub fn workload_hash<S: AsRef<str>>(sentences: &[S]) -> String {
    let mut h = Sha256::new();
    for s in sentences {
        h.update(s.as_ref().as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Runs `warmup` unmeasured passes and `repeats` measured passes over
/// `sentences` in order, one sentence at a time.
pub fn bench<S, F, E>(
    classifier_id: &str,
    mut classify: F,
    sentences: &[S],
    warmup: usize,
    repeats: usize,
) -> Result<LatencyReport, BenchError>
where
    S: AsRef<str>,
    F: FnMut(&str) -> Result<(), E>,
    E: Display,
{
    if sentences.is_empty() || repeats == 0 {
        return Err(BenchError::Empty);
    }
    let mut run = |record: &mut Vec<f64>| -> Result<f64, BenchError> {
        let pass = Instant::now();
        for (index, s) in sentences.iter().enumerate() {
            let t0 = Instant::now();
            classify(s.as_ref()).map_err(|e| BenchError::Classifier {
                index,
                message: e.to_string(),
            })?;
            record.push(t0.elapsed().as_secs_f64());
        }
        Ok(pass.elapsed().as_secs_f64())
    };
    let mut discard = Vec::new();
    for _ in 0..warmup {
        run(&mut discard)?;
        discard.clear();
    }
    let mut per_sentence = Vec::with_capacity(sentences.len() * repeats);
    let mut passes = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        passes.push(run(&mut per_sentence)?);
    }
    let total: f64 = passes.iter().sum();
    let n = sentences.len() * repeats;
    let per_repeat: Vec<f64> = passes.iter().map(|s| sentences.len() as f64 / s).collect();
    let mean = per_repeat.iter().sum::<f64>() / per_repeat.len() as f64;
    let spread = per_repeat.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - per_repeat.iter().cloned().fold(f64::INFINITY, f64::min);
    per_sentence.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        classifier_id: classifier_id.into(),
        n_sentences: n,
        workload_sentences: sentences.len(),
        warmup,
        repeats,
        total_seconds: total,
        sentences_per_second: n as f64 / total,
        per_sentence_quantiles: Quantiles {
            p50: quantile(&per_sentence, 0.5),
            p90: quantile(&per_sentence, 0.9),
            p99: quantile(&per_sentence, 0.99),
        },
        per_repeat_sentences_per_second: per_repeat,
        noise_bound: (2.0 * spread / mean).max(NOISE_FLOOR),
        workload_sha256: workload_hash(sentences),
        fingerprint: Fingerprint::current(),
    })
}

/// How many times faster `a` is than `b` on the same workload.
pub fn speedup(a: &LatencyReport, b: &LatencyReport) -> Result<f64, BenchError> {
    if a.workload_sha256 != b.workload_sha256 {
        return Err(BenchError::Incomparable {
            a: a.workload_sha256.clone(),
            b: b.workload_sha256.clone(),
        });
    }
    Ok(a.sentences_per_second / b.sentences_per_second)
}
