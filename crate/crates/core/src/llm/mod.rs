//! Prompt rendering, LLM output parsing, generation clients and fine-tune
//! data export.

mod client;
mod export;
mod parse;
mod template;

pub use client::{
    classify_llm, inference_prompt, Correlated, FnClient, GenerationClient, HttpClient,
    LlmClassifier, LlmError, RetryPolicy, TransportError, ENDPOINT_ENV, TOKEN_ENV,
};
pub use export::{export_finetune_data, ExportError, FinetuneManifest, LoraConfig};
pub use parse::{parse_output, ParseMode, ParsedLlmOutput};
pub use template::{PromptTemplate, TemplateError, TemplateKind};
