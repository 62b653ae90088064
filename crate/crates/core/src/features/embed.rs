use std::io::Write;
use std::process::{Command, Stdio};

use sha2::{Digest, Sha256};

use super::annotate::CuiAnnotation;
use super::FeatureError;

/// A frozen sentence embedder for concept text. Output is never trained.
pub trait SentenceEmbedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, FeatureError>;
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Component `i` is the first 8 bytes of `sha256("{i}:{text}")` read as a
/// big-endian u64 and mapped linearly onto `[-1, 1)`.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim }
    }
}

impl SentenceEmbedder for HashEmbedder {
    fn id(&self) -> &str {
        "hash-stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, FeatureError> {
        Ok((0..self.dim)
            .map(|i| {
                let digest = Sha256::digest(format!("{i}:{text}").as_bytes());
                let word = u64::from_be_bytes(digest[..8].try_into().unwrap());
                word as f64 / 2f64.powi(64) * 2.0 - 1.0
            })
            .collect())
    }
}

/// Runs `sh -c <command>` per call with the text on stdin; stdout must be a
/// JSON array of `dim` numbers.
#[derive(Debug, Clone)]
pub struct CommandEmbedder {
    id: String,
    command: String,
    dim: usize,
    concurrent_safe: bool,
}

impl CommandEmbedder {
    pub fn new(command: impl Into<String>, dim: usize, concurrent_safe: bool) -> Self {
        let command = command.into();
        CommandEmbedder {
            id: format!("cmd:{command}"),
            command,
            dim,
            concurrent_safe,
        }
    }
}

impl SentenceEmbedder for CommandEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn concurrent_safe(&self) -> bool {
        self.concurrent_safe
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, FeatureError> {
        let err = |m: String| FeatureError::Embedding(format!("`{}`: {m}", self.command));
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| err(e.to_string()))?;
        child
            .stdin
            .take()
            .unwrap()
            .write_all(text.as_bytes())
            .map_err(|e| err(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| err(e.to_string()))?;
        if !out.status.success() {
            return Err(err(format!(
                "exit {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let v: Vec<f64> = serde_json::from_slice(&out.stdout).map_err(|e| err(e.to_string()))?;
        if v.len() != self.dim {
            return Err(err(format!(
                "returned {} values, expected {}",
                v.len(),
                self.dim
            )));
        }
        Ok(v)
    }
}

/// Builds an embedder from its config identifier: `hash-stub` or
/// `cmd:<shell command>`.
pub fn embedder_from_id(id: &str, dim: usize) -> Result<Box<dyn SentenceEmbedder>, FeatureError> {
    if id == "hash-stub" {
        Ok(Box::new(HashEmbedder::new(dim)))
    } else if let Some(cmd) = id.strip_prefix("cmd:") {
        Ok(Box::new(CommandEmbedder::new(cmd, dim, true)))
    } else {
        Err(FeatureError::Config(format!("unknown embedder `{id}`")))
    }
}

/// The text embedded for a concept.
pub fn cui_text(ann: &CuiAnnotation) -> String {
    format!("{}:{}", ann.preferred_name, ann.definition)
}

pub fn embed_cui(
    embedder: &dyn SentenceEmbedder,
    ann: &CuiAnnotation,
) -> Result<Vec<f64>, FeatureError> {
    if ann.preferred_name.is_empty() {
        return Err(FeatureError::Embedding(format!(
            "concept {} has no preferred name",
            ann.cui
        )));
    }
    let v = embedder.embed(&cui_text(ann))?;
    if v.len() != embedder.dim() {
        return Err(FeatureError::Embedding(format!(
            "embedder returned {} values, expected {}",
            v.len(),
            embedder.dim()
        )));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Recording {
        calls: Mutex<Vec<String>>,
    }

    impl SentenceEmbedder for Recording {
        fn id(&self) -> &str {
            "rec"
        }
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, text: &str) -> Result<Vec<f64>, FeatureError> {
            self.calls.lock().unwrap().push(text.to_string());
            Ok(vec![text.len() as f64, 0.0])
        }
    }

    fn ann(name: &str, def: &str) -> CuiAnnotation {
        CuiAnnotation {
            cui: "C0019863".into(),
            preferred_name: name.into(),
            definition: def.into(),
            start: 0,
            end: 1,
        }
    }

    #[test]
    fn empty_definition_embeds_name_and_colon() {
        let rec = Recording {
            calls: Mutex::new(Vec::new()),
        };
        embed_cui(&rec, &ann("Ran away, life event", "")).unwrap();
        assert_eq!(
            *rec.calls.lock().unwrap(),
            vec!["Ran away, life event:".to_string()]
        );
    }

    #[test]
    fn hash_stub_matches_recomputation() {
        let e = HashEmbedder::new(4);
        let got = embed_cui(&e, &ann("X", "Y")).unwrap();
        let expected: Vec<f64> = (0..4)
            .map(|i| {
                let d = Sha256::digest(format!("{i}:X:Y"));
                let mut b = [0u8; 8];
                b.copy_from_slice(&d[..8]);
                (u64::from_be_bytes(b) as f64) / 18446744073709551616.0 * 2.0 - 1.0
            })
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got, embed_cui(&e, &ann("X", "Y")).unwrap());
        assert!(got.iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn nameless_concept_is_rejected() {
        assert!(embed_cui(&HashEmbedder::new(2), &ann("", "d")).is_err());
    }

    #[test]
    fn command_embedder_round_trip_and_failure() {
        let ok = CommandEmbedder::new("cat >/dev/null; echo '[0.5, -1]'", 2, true);
        assert_eq!(ok.embed("hello").unwrap(), vec![0.5, -1.0]);
        let wrong_dim = CommandEmbedder::new("echo '[1]'", 2, true);
        assert!(matches!(
            wrong_dim.embed("x"),
            Err(FeatureError::Embedding(_))
        ));
        let failing = CommandEmbedder::new("exit 3", 2, true);
        assert!(failing.embed("x").is_err());
        assert!(embedder_from_id("nope", 2).is_err());
    }
}
