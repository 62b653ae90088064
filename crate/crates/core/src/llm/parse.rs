use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::label::{LabelSet, SdohLabel, NO_SDOH_TOKEN};

static BACKTICK_GROUP: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)```(.*?)```").unwrap());
static LABEL_WORD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(housing|transportation|relationship|parent|employment|support)\b").unwrap()
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    Backtick,
    FallbackScan,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLlmOutput {
    pub labels: LabelSet,
    pub raw: String,
    /// Tokens from the answer block that are not labels. A `-` mixed with real
    /// labels is reported here too.
    pub hallucinated_tokens: Vec<String>,
    pub parse_mode: ParseMode,
}

fn clean(token: &str) -> String {
    token
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '`' | '\'' | '"' | '.' | '*'))
        .to_lowercase()
}

/// Extracts labels from free-form generation text. Never fails: an
/// unparseable answer is reported with [`ParseMode::Failed`].
///
/// The last triple-backtick group is the answer. Without one, the final
/// non-blank line is scanned for whole-word label names.
pub fn parse_output(raw: &str) -> ParsedLlmOutput {
    if let Some(group) = BACKTICK_GROUP.captures_iter(raw).last() {
        let mut labels = LabelSet::new();
        let mut hallucinated = Vec::new();
        let mut saw_sentinel = false;
        for token in group[1]
            .split([',', '\n', ';'])
            .map(clean)
            .filter(|t| !t.is_empty())
        {
            if token == NO_SDOH_TOKEN {
                saw_sentinel = true;
            } else if let Ok(label) = token.parse::<SdohLabel>() {
                labels.insert(label);
            } else {
                hallucinated.push(token);
            }
        }
        if saw_sentinel && !labels.is_empty() {
            hallucinated.push(NO_SDOH_TOKEN.to_string());
        }
        return ParsedLlmOutput {
            labels,
            raw: raw.to_string(),
            hallucinated_tokens: hallucinated,
            parse_mode: ParseMode::Backtick,
        };
    }

    let last_line = raw
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("");
    let labels: LabelSet = LABEL_WORD
        .find_iter(last_line)
        .filter_map(|m| m.as_str().to_lowercase().parse::<SdohLabel>().ok())
        .collect();
    ParsedLlmOutput {
        labels,
        raw: raw.to_string(),
        hallucinated_tokens: Vec::new(),
        parse_mode: if labels.is_empty() {
            ParseMode::Failed
        } else {
            ParseMode::FallbackScan
        },
    }
}
