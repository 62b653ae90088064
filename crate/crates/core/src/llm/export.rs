use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::template::{PromptTemplate, TemplateError, TemplateKind};
use crate::dataset::Corpus;
use crate::stratify::SplitSpec;
use crate::util::sha256_hex;

/// Low-rank adapter fine-tuning settings recorded with an export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct LoraConfig {
    pub rank: u32,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: u32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 64,
            learning_rate: 5e-5,
            dropout: 0.10,
            epochs: 3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("fine-tune export needs a train template, got {0}")]
    WrongTemplate(TemplateKind),
    #[error("invalid LoRA config: {0}")]
    InvalidLora(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub lora: LoraConfig,
    pub template_sha256: String,
    pub split_sha256: String,
    pub prompts_file: String,
    pub prompts_sha256: String,
    pub records: usize,
    pub include_negative_label: bool,
}

#[derive(Serialize)]
struct PromptLine<'a> {
    prompt: &'a str,
}

/// Writes `train.jsonl` (one rendered training prompt per train-split record,
/// in split order) and `manifest.json` into `dir`.
///
/// With `include_negative_label = false`, records with no SDoH are skipped
/// instead of being rendered with `-`.
pub fn export_finetune_data(
    corpus: &Corpus,
    split: &SplitSpec,
    template: &PromptTemplate,
    lora: LoraConfig,
    include_negative_label: bool,
    dir: impl AsRef<Path>,
) -> Result<FinetuneManifest, ExportError> {
    if template.kind() != TemplateKind::Train {
        return Err(ExportError::WrongTemplate(template.kind()));
    }
    if lora.rank == 0
        || lora.epochs == 0
        || !(0.0..1.0).contains(&lora.dropout)
        || lora.learning_rate <= 0.0
    {
        return Err(ExportError::InvalidLora(format!("{lora:?}")));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut buf = Vec::new();
    let mut records = 0;
    for r in corpus.select(&split.train) {
        if r.gold.is_empty() && !include_negative_label {
            continue;
        }
        let prompt = template.render(&r.text, Some(r.gold))?;
        serde_json::to_writer(&mut buf, &PromptLine { prompt: &prompt })
            .map_err(std::io::Error::from)?;
        buf.push(b'\n');
        records += 1;
    }
    let prompts_file = "train.jsonl".to_string();
    fs::write(dir.join(&prompts_file), &buf)?;

    let manifest = FinetuneManifest {
        lora,
        template_sha256: template.sha256(),
        split_sha256: sha256_hex(split.to_json().as_bytes()),
        prompts_sha256: sha256_hex(&buf),
        prompts_file,
        records,
        include_negative_label,
    };
    let mut w = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(manifest)
}
