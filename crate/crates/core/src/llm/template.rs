use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::label::LabelSet;
use crate::util::sha256_hex;

const FEW_SHOT: &str = include_str!("../../templates/few_shot.txt");
const TRAIN: &str = include_str!("../../templates/train.txt");

const TEXT: &str = "{{ text }}";
const LABELS: &str = "{{ labels }}";
/// Reserved slot for prompt-side feature injection. Renders empty unless
/// content is supplied; the shipped templates do not use it.
const INJECTION: &str = "{{ injection }}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    FewShot,
    Train,
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateKind::FewShot => "few_shot",
            TemplateKind::Train => "train",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("{kind} template must contain {placeholder}")]
    MissingPlaceholder {
        kind: TemplateKind,
        placeholder: &'static str,
    },
    #[error("few_shot template must not contain {{{{ labels }}}}")]
    UnexpectedLabels,
    #[error("{kind} template requires labels: {required}, but labels were {}", if *.supplied { "supplied" } else { "missing" })]
    LabelsMismatch {
        kind: TemplateKind,
        required: bool,
        supplied: bool,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    body: String,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        if !body.contains(TEXT) {
            return Err(TemplateError::MissingPlaceholder {
                kind,
                placeholder: TEXT,
            });
        }
        match kind {
            TemplateKind::FewShot if body.contains(LABELS) => {
                return Err(TemplateError::UnexpectedLabels)
            }
            TemplateKind::Train if !body.contains(LABELS) => {
                return Err(TemplateError::MissingPlaceholder {
                    kind,
                    placeholder: LABELS,
                })
            }
            _ => {}
        }
        Ok(PromptTemplate { kind, body })
    }

    /// The shipped few-shot prompt with label definitions and six examples.
    pub fn few_shot() -> Self {
        Self::new(TemplateKind::FewShot, FEW_SHOT.trim_end_matches('\n'))
            .expect("shipped template is valid")
    }

    /// The shipped supervised fine-tuning prompt.
    pub fn train() -> Self {
        Self::new(TemplateKind::Train, TRAIN.trim_end_matches('\n'))
            .expect("shipped template is valid")
    }

    pub fn load(kind: TemplateKind, path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let body = std::fs::read_to_string(path)?;
        Self::new(kind, body.trim_end_matches('\n'))
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn sha256(&self) -> String {
        sha256_hex(self.body.as_bytes())
    }

    pub fn render(&self, text: &str, labels: Option<LabelSet>) -> Result<String, TemplateError> {
        self.render_with_injection(text, labels, None)
    }

    /// Substitutes placeholders in one left-to-right pass, so placeholder-like
    /// text inside the sentence is never expanded.
    pub fn render_with_injection(
        &self,
        text: &str,
        labels: Option<LabelSet>,
        injection: Option<&str>,
    ) -> Result<String, TemplateError> {
        let required = self.kind == TemplateKind::Train;
        if required != labels.is_some() {
            return Err(TemplateError::LabelsMismatch {
                kind: self.kind,
                required,
                supplied: labels.is_some(),
            });
        }
        let label_text = labels.map(LabelSet::to_prompt_string).unwrap_or_default();
        let mut out = String::with_capacity(self.body.len() + text.len() + 32);
        let mut rest = self.body.as_str();
        while let Some(pos) = rest.find("{{ ") {
            out.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            let (value, len) = if tail.starts_with(TEXT) {
                (text, TEXT.len())
            } else if tail.starts_with(LABELS) {
                (label_text.as_str(), LABELS.len())
            } else if tail.starts_with(INJECTION) {
                (injection.unwrap_or(""), INJECTION.len())
            } else {
                ("{{ ", 3)
            };
            out.push_str(value);
            rest = &tail[len..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::SdohLabel;

    #[test]
    fn shipped_templates_have_expected_placeholders() {
        let fs = PromptTemplate::few_shot();
        assert!(fs.body().contains(TEXT) && !fs.body().contains(LABELS));
        let tr = PromptTemplate::train();
        assert!(tr.body().contains(TEXT) && tr.body().contains(LABELS));
    }

    #[test]
    fn train_render_suffixes() {
        let t = PromptTemplate::train();
        let out = t
            .render(
                "Pt works at a bakery.",
                Some([SdohLabel::Employment].into_iter().collect()),
            )
            .unwrap();
        assert!(
            out.ends_with("### Sentence: Pt works at a bakery.\n### SDOH labels: ```employment```")
        );
        let out = t.render("Vitals stable.", Some(LabelSet::EMPTY)).unwrap();
        assert!(out.ends_with("```-```"));
    }

    #[test]
    fn few_shot_render_embeds_definitions_and_examples() {
        let out = PromptTemplate::few_shot()
            .render("Pt lives alone.", None)
            .unwrap();
        for l in SdohLabel::ALL {
            assert!(out.contains(&format!("* `{}`:", l.as_str())), "{l}");
        }
        assert_eq!(out.matches("### Sentence:").count(), 7);
        assert!(out.contains("### Sentence:Pt lives in Arlington.\n### SDOH labels:```housing```"));
        assert!(out.contains(
            "Here are some examples of \"Sentence\" input and \"SDOH labels\" you output:"
        ));
        assert!(out.ends_with("### Sentence:Pt lives alone.\n### SDOH labels:"));
    }

    #[test]
    fn labels_must_match_kind() {
        assert!(PromptTemplate::few_shot()
            .render("x", Some(LabelSet::EMPTY))
            .is_err());
        assert!(PromptTemplate::train().render("x", None).is_err());
        assert!(PromptTemplate::new(TemplateKind::Train, "{{ text }} only").is_err());
        assert!(PromptTemplate::new(TemplateKind::FewShot, "no text").is_err());
    }

    #[test]
    fn placeholder_text_in_sentence_is_not_expanded() {
        let t = PromptTemplate::train();
        let out = t
            .render("weird {{ labels }} here", Some(LabelSet::EMPTY))
            .unwrap();
        assert!(out.contains("### Sentence: weird {{ labels }} here\n"));
    }

    #[test]
    fn injection_slot_is_optional() {
        let t = PromptTemplate::new(TemplateKind::FewShot, "{{ injection }}S:{{ text }}").unwrap();
        assert_eq!(t.render("a", None).unwrap(), "S:a");
        assert_eq!(
            t.render_with_injection("a", None, Some("[x]")).unwrap(),
            "[x]S:a"
        );
    }
}
