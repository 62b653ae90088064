use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::parse::{parse_output, ParsedLlmOutput};
use super::template::{PromptTemplate, TemplateError};

/// Environment variable holding the generation endpoint URL.
pub const ENDPOINT_ENV: &str = "SDOH_LLM_ENDPOINT";
/// Environment variable holding an optional bearer token.
pub const TOKEN_ENV: &str = "SDOH_LLM_TOKEN";

#[derive(Debug, Clone, thiserror::Error)]
#[error("{message}")]
pub struct TransportError {
    pub message: String,
    /// Worth retrying: timeouts, dropped connections, 429 and 5xx.
    pub transient: bool,
}

impl TransportError {
    pub fn transient(message: impl Into<String>) -> Self {
        TransportError {
            message: message.into(),
            transient: true,
        }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        TransportError {
            message: message.into(),
            transient: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("generation backend failed after {attempts} attempt(s): {source}")]
    Transport {
        attempts: usize,
        source: TransportError,
    },
    #[error("no generation endpoint configured (set {ENDPOINT_ENV})")]
    NoEndpoint,
}

/// A text generation backend: prompt in, generated text out.
pub trait GenerationClient: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, TransportError>;
}

impl<C: GenerationClient + ?Sized> GenerationClient for Arc<C> {
    fn generate(&self, prompt: &str) -> Result<String, TransportError> {
        (**self).generate(prompt)
    }
}

/// Adapter for closures, used for stubs and in-process models.
pub struct FnClient<F>(pub F);

impl<F> GenerationClient for FnClient<F>
where
    F: Fn(&str) -> Result<String, TransportError> + Send + Sync,
{
    fn generate(&self, prompt: &str) -> Result<String, TransportError> {
        (self.0)(prompt)
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// POSTs `{"prompt": ...}` and expects `{"text": ...}`.
pub struct HttpClient {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpClient {
            endpoint: endpoint.into(),
            token,
            agent,
        }
    }

    /// Endpoint and token from `SDOH_LLM_ENDPOINT` / `SDOH_LLM_TOKEN`.
    pub fn from_env(timeout: Duration) -> Result<Self, LlmError> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| LlmError::NoEndpoint)?;
        Ok(Self::new(endpoint, std::env::var(TOKEN_ENV).ok(), timeout))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl GenerationClient for HttpClient {
    fn generate(&self, prompt: &str) -> Result<String, TransportError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(GenerateRequest { prompt }).map_err(|e| {
            let transient = match &e {
                ureq::Error::StatusCode(code) => *code == 429 || *code >= 500,
                ureq::Error::Io(_) | ureq::Error::Timeout(_) | ureq::Error::ConnectionFailed => {
                    true
                }
                _ => false,
            };
            TransportError {
                message: e.to_string(),
                transient,
            }
        })?;
        let body: GenerateResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::permanent(format!("malformed response body: {e}")))?;
        Ok(body.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: usize,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 200,
        }
    }
}

fn generate_with_retry<C: GenerationClient + ?Sized>(
    client: &C,
    prompt: &str,
    retry: RetryPolicy,
) -> Result<String, LlmError> {
    let max = retry.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match client.generate(prompt) {
            Ok(text) => return Ok(text),
            Err(e) if e.transient && attempt < max => {
                thread::sleep(Duration::from_millis(retry.backoff_ms * attempt as u64));
            }
            Err(source) => {
                return Err(LlmError::Transport {
                    attempts: attempt,
                    source,
                })
            }
        }
    }
}

/// Renders the few-shot or inference prompt, sends it and parses the reply.
/// A reply that cannot be parsed is not an error; see
/// [`ParsedLlmOutput::parse_mode`].
pub fn classify_llm<C: GenerationClient + ?Sized>(
    client: &C,
    template: &PromptTemplate,
    text: &str,
    retry: RetryPolicy,
) -> Result<ParsedLlmOutput, LlmError> {
    let prompt = match template.kind() {
        super::TemplateKind::FewShot => template.render(text, None)?,
        // a fine-tuned model completes the label block of the training prompt
        super::TemplateKind::Train => inference_prompt(template, text)?,
    };
    let raw = generate_with_retry(client, &prompt, retry)?;
    Ok(parse_output(&raw))
}

/// Training prompt cut just before the answer block.
pub fn inference_prompt(template: &PromptTemplate, text: &str) -> Result<String, TemplateError> {
    const MARKER: &str = "\u{0}SDOH_LABELS\u{0}";
    let body = template
        .body()
        .replacen("```{{ labels }}```", MARKER, 1)
        .replacen("{{ labels }}", MARKER, 1);
    let few = PromptTemplate::new(super::TemplateKind::FewShot, body)?;
    let rendered = few.render(text, None)?;
    Ok(rendered[..rendered.find(MARKER).unwrap_or(rendered.len())]
        .trim_end()
        .to_string())
}

/// LLM classification with retry and a bound on concurrent requests.
#[derive(Clone)]
pub struct LlmClassifier {
    pub client: Arc<dyn GenerationClient>,
    pub template: PromptTemplate,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

/// A batch result matched to its request id.
#[derive(Debug)]
pub struct Correlated<T> {
    pub id: String,
    pub result: Result<T, LlmError>,
}

impl LlmClassifier {
    pub fn new(client: Arc<dyn GenerationClient>, template: PromptTemplate) -> Self {
        LlmClassifier {
            client,
            template,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        }
    }

    pub fn classify(&self, text: &str) -> Result<ParsedLlmOutput, LlmError> {
        classify_llm(self.client.as_ref(), &self.template, text, self.retry)
    }

    /// Classifies `(id, text)` pairs with at most `max_in_flight` concurrent
    /// requests. Output order follows the input, each entry tagged with its id.
    pub fn classify_batch(&self, items: &[(String, String)]) -> Vec<Correlated<ParsedLlmOutput>> {
        let results =
            crate::util::bounded_map(items, self.max_in_flight, |(_, text)| self.classify(text));
        items
            .iter()
            .zip(results)
            .map(|((id, _), result)| Correlated {
                id: id.clone(),
                result,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{LabelSet, SdohLabel};
    use crate::llm::ParseMode;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn echo(answer: &'static str) -> FnClient<impl Fn(&str) -> Result<String, TransportError>> {
        FnClient(move |_: &str| Ok(answer.to_string()))
    }

    #[test]
    fn stub_backend_plumbing() {
        let out = classify_llm(
            &echo("```parent```"),
            &PromptTemplate::few_shot(),
            "Pt has a son, 4.",
            RetryPolicy::default(),
        )
        .unwrap();
        assert_eq!(out.labels, [SdohLabel::Parent].into_iter().collect());
        assert_eq!(out.raw, "```parent```");
    }

    #[test]
    fn prose_backend_falls_back() {
        let out = classify_llm(
            &echo("The patient mentions a spouse.\nrelationship"),
            &PromptTemplate::few_shot(),
            "Pt and wife.",
            RetryPolicy::default(),
        )
        .unwrap();
        assert_eq!(out.parse_mode, ParseMode::FallbackScan);
        assert_eq!(out.labels, [SdohLabel::Relationship].into_iter().collect());
    }

    #[test]
    fn multilabel_generation() {
        let out = classify_llm(
            &echo("```relationship, parent```"),
            &PromptTemplate::train(),
            "x",
            RetryPolicy::default(),
        )
        .unwrap();
        assert_eq!(out.labels.len(), 2);
    }

    #[test]
    fn inference_prompt_stops_before_answer() {
        let p = inference_prompt(&PromptTemplate::train(), "Pt is homeless.").unwrap();
        assert!(p.ends_with("### Sentence: Pt is homeless.\n### SDOH labels:"));
    }

    #[test]
    fn retries_transient_then_gives_up() {
        let calls = AtomicUsize::new(0);
        let flaky = FnClient(|_: &str| {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(TransportError::transient("reset"))
            } else {
                Ok("```support```".to_string())
            }
        });
        let retry = RetryPolicy {
            max_attempts: 3,
            backoff_ms: 0,
        };
        assert!(classify_llm(&flaky, &PromptTemplate::few_shot(), "x", retry).is_ok());
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let down = FnClient(|_: &str| Err(TransportError::transient("refused")));
        match classify_llm(&down, &PromptTemplate::few_shot(), "x", retry) {
            Err(LlmError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
        let denied = FnClient(|_: &str| Err(TransportError::permanent("401")));
        match classify_llm(&denied, &PromptTemplate::few_shot(), "x", retry) {
            Err(LlmError::Transport { attempts, .. }) => assert_eq!(attempts, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batch_results_are_correlated_by_id() {
        let client = Arc::new(FnClient(|prompt: &str| {
            let sentence = prompt.rsplit("### Sentence:").next().unwrap();
            // later requests answer sooner, so arrival order differs from input order
            let n: u64 = sentence
                .trim()
                .split('\n')
                .next()
                .unwrap()
                .trim_start_matches('s')
                .parse()
                .unwrap();
            thread::sleep(Duration::from_millis(20u64.saturating_sub(n * 2)));
            Ok(if n.is_multiple_of(2) {
                "```housing```".into()
            } else {
                "```-```".into()
            })
        }));
        let mut llm = LlmClassifier::new(client, PromptTemplate::few_shot());
        llm.max_in_flight = 4;
        let items: Vec<(String, String)> = (0..10)
            .map(|i| (format!("id{i}"), format!("s{i}")))
            .collect();
        let out = llm.classify_batch(&items);
        for (i, c) in out.iter().enumerate() {
            assert_eq!(c.id, format!("id{i}"));
            let labels = c.result.as_ref().unwrap().labels;
            assert_eq!(labels.is_empty(), i % 2 == 1);
        }
    }

    #[test]
    fn http_adapter_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            assert!(req["prompt"]
                .as_str()
                .unwrap()
                .contains("Pt lives in a shelter."));
            let payload = r#"{"text":"```housing```"}"#;
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                payload.len(),
                payload
            )
            .unwrap();
            auth
        });
        let client = HttpClient::new(
            format!("http://{addr}/generate"),
            Some("tok".into()),
            Duration::from_secs(5),
        );
        let out = classify_llm(
            &client,
            &PromptTemplate::few_shot(),
            "Pt lives in a shelter.",
            RetryPolicy::default(),
        )
        .unwrap();
        assert_eq!(
            out.labels,
            [SdohLabel::Housing].into_iter().collect::<LabelSet>()
        );
        assert_eq!(
            server.join().unwrap().to_ascii_lowercase(),
            "authorization: bearer tok"
        );
    }

    #[test]
    fn http_adapter_unreachable_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let client = HttpClient::new(format!("http://{addr}/"), None, Duration::from_secs(2));
        let retry = RetryPolicy {
            max_attempts: 2,
            backoff_ms: 0,
        };
        match classify_llm(&client, &PromptTemplate::few_shot(), "x", retry) {
            Err(LlmError::Transport { attempts, source }) => {
                assert!(source.transient);
                assert_eq!(attempts, 2);
            }
            other => panic!("{other:?}"),
        }
    }
}
