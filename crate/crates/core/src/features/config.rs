use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FeatureError;

/// A one-hot linguistic feature group, or the concept embedding block.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    schemars::JsonSchema,
)]
pub enum FeatureKind {
    #[serde(rename = "pos")]
    Pos,
    #[serde(rename = "dep")]
    Dep,
    #[serde(rename = "ent")]
    Ent,
    #[serde(rename = "med_ent")]
    MedEnt,
    #[serde(rename = "tok_sdoh")]
    TokSdoh,
    #[serde(rename = "cui_emb")]
    CuiEmb,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 6] = [
        FeatureKind::Pos,
        FeatureKind::Dep,
        FeatureKind::Ent,
        FeatureKind::MedEnt,
        FeatureKind::TokSdoh,
        FeatureKind::CuiEmb,
    ];

    /// The categorical groups in concatenation order.
    pub const CATEGORICAL: [FeatureKind; 5] = [
        FeatureKind::Pos,
        FeatureKind::Dep,
        FeatureKind::Ent,
        FeatureKind::MedEnt,
        FeatureKind::TokSdoh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Pos => "pos",
            FeatureKind::Dep => "dep",
            FeatureKind::Ent => "ent",
            FeatureKind::MedEnt => "med_ent",
            FeatureKind::TokSdoh => "tok_sdoh",
            FeatureKind::CuiEmb => "cui_emb",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| FeatureError::Config(format!("unknown feature `{s}`")))
    }
}

/// Parses `pos+dep+cui_emb` style names. `none` or an empty string is the
/// encoder-only set.
pub fn parse_feature_set(s: &str) -> Result<Vec<FeatureKind>, FeatureError> {
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    let mut kinds = s
        .split(['+', ','])
        .map(str::parse)
        .collect::<Result<Vec<_>, _>>()?;
    kinds.sort();
    kinds.dedup();
    Ok(kinds)
}

pub fn feature_set_name(kinds: &[FeatureKind]) -> String {
    if kinds.is_empty() {
        "none".into()
    } else {
        kinds
            .iter()
            .map(|k| k.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Universal dependencies coarse tags, 17 values.
pub const UPOS_TAGS: [&str; 17] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN",
    "PUNCT", "SCONJ", "SYM", "VERB", "X",
];

/// OntoNotes entity types, 18 values.
pub const ONTONOTES_ENTS: [&str; 18] = [
    "CARDINAL",
    "DATE",
    "EVENT",
    "FAC",
    "GPE",
    "LANGUAGE",
    "LAW",
    "LOC",
    "MONEY",
    "NORP",
    "ORDINAL",
    "ORG",
    "PERCENT",
    "PERSON",
    "PRODUCT",
    "QUANTITY",
    "TIME",
    "WORK_OF_ART",
];

pub const MED_ENTS: [&str; 1] = ["ENTITY"];

pub const TOKEN_SDOH_TAGS: [&str; 6] = [
    "housing",
    "transportation",
    "relationship",
    "parent",
    "employment",
    "support",
];

pub const DEFAULT_DEP_CAP: usize = 16;

/// Features, vocabularies and concept embedding settings. Vocabularies are
/// data: they depend on the tagger versions that produced the annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct FeatureConfig {
    pub enabled: Vec<FeatureKind>,
    /// Closed tag vocabulary per categorical group (`dep` is implied by the cap).
    pub vocabularies: BTreeMap<FeatureKind, Vec<String>>,
    /// Dependency depths above the cap are clamped to it.
    pub dep_cap: usize,
    /// Identifier of the sentence embedder used for concept text.
    pub embedder: String,
    pub cui_dim: usize,
    /// Adapters listed here may be missing; their groups encode as zeros.
    #[serde(default)]
    pub optional: Vec<FeatureKind>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::with_features(&FeatureKind::ALL)
    }
}

impl FeatureConfig {
    pub fn with_features(kinds: &[FeatureKind]) -> Self {
        let own = |tags: &[&str]| tags.iter().map(|t| t.to_string()).collect::<Vec<_>>();
        let mut vocabularies = BTreeMap::new();
        vocabularies.insert(FeatureKind::Pos, own(&UPOS_TAGS));
        vocabularies.insert(FeatureKind::Ent, own(&ONTONOTES_ENTS));
        vocabularies.insert(FeatureKind::MedEnt, own(&MED_ENTS));
        vocabularies.insert(FeatureKind::TokSdoh, own(&TOKEN_SDOH_TAGS));
        let mut enabled = kinds.to_vec();
        enabled.sort();
        enabled.dedup();
        FeatureConfig {
            enabled,
            vocabularies,
            dep_cap: DEFAULT_DEP_CAP,
            embedder: "hash-stub".into(),
            cui_dim: 32,
            optional: Vec::new(),
        }
    }

    pub fn is_enabled(&self, kind: FeatureKind) -> bool {
        self.enabled.contains(&kind)
    }

    pub fn is_optional(&self, kind: FeatureKind) -> bool {
        self.optional.contains(&kind)
    }

    pub fn name(&self) -> String {
        feature_set_name(&self.enabled)
    }

    /// Width of a categorical group.
    pub fn group_width(&self, kind: FeatureKind) -> usize {
        match kind {
            FeatureKind::Dep => self.dep_cap + 1,
            FeatureKind::CuiEmb => self.cui_dim,
            k => self.vocabularies.get(&k).map_or(0, Vec::len),
        }
    }

    pub fn onehot_width(&self) -> usize {
        FeatureKind::CATEGORICAL
            .iter()
            .filter(|k| self.is_enabled(**k))
            .map(|k| self.group_width(*k))
            .sum()
    }

    pub fn cui_width(&self) -> usize {
        if self.is_enabled(FeatureKind::CuiEmb) {
            self.cui_dim
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        for k in FeatureKind::CATEGORICAL {
            if k != FeatureKind::Dep && self.is_enabled(k) && self.group_width(k) == 0 {
                return Err(FeatureError::Config(format!(
                    "feature `{k}` is enabled but has an empty vocabulary"
                )));
            }
        }
        if self.is_enabled(FeatureKind::CuiEmb) && self.cui_dim == 0 {
            return Err(FeatureError::Config(
                "cui_emb enabled with cui_dim = 0".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| FeatureError::Config(e.to_string()))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| FeatureError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces a vocabulary from a newline-separated file.
    pub fn load_vocabulary(
        &mut self,
        kind: FeatureKind,
        path: impl AsRef<Path>,
    ) -> Result<(), FeatureError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| FeatureError::Config(e.to_string()))?;
        let tags = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        self.vocabularies.insert(kind, tags);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_follow_vocabularies() {
        let cfg = FeatureConfig::with_features(&[FeatureKind::Pos, FeatureKind::Dep]);
        assert_eq!(cfg.onehot_width(), 17 + 16 + 1);
        assert_eq!(cfg.cui_width(), 0);
        let all = FeatureConfig::default();
        assert_eq!(all.onehot_width(), 17 + 17 + 18 + 1 + 6);
        assert_eq!(all.cui_width(), 32);
    }

    #[test]
    fn feature_set_names_round_trip() {
        let kinds = parse_feature_set("cui_emb+pos+dep").unwrap();
        assert_eq!(
            kinds,
            vec![FeatureKind::Pos, FeatureKind::Dep, FeatureKind::CuiEmb]
        );
        assert_eq!(feature_set_name(&kinds), "pos+dep+cui_emb");
        assert_eq!(parse_feature_set("none").unwrap(), vec![]);
        assert!(parse_feature_set("pos+wealth").is_err());
    }
}
