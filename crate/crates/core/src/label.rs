//! The closed six-label SDoH vocabulary and label sets over it.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

/// Token used at the prompt boundary for the empty label set.
pub const NO_SDOH_TOKEN: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SdohLabel {
    Housing,
    Transportation,
    Relationship,
    Parent,
    Employment,
    Support,
}

impl SdohLabel {
    /// All labels in canonical order. Indexes into per-label arrays follow it.
    pub const ALL: [SdohLabel; 6] = [
        SdohLabel::Housing,
        SdohLabel::Transportation,
        SdohLabel::Relationship,
        SdohLabel::Parent,
        SdohLabel::Employment,
        SdohLabel::Support,
    ];

    pub const COUNT: usize = 6;

    pub fn as_str(self) -> &'static str {
        match self {
            SdohLabel::Housing => "housing",
            SdohLabel::Transportation => "transportation",
            SdohLabel::Relationship => "relationship",
            SdohLabel::Parent => "parent",
            SdohLabel::Employment => "employment",
            SdohLabel::Support => "support",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SdohLabel> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for SdohLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown SDoH label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for SdohLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// A subset of the six labels. The empty set means "no SDoH".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSet(u8);

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);

    pub fn new() -> Self {
        Self::EMPTY
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits < 64).then_some(LabelSet(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn insert(&mut self, label: SdohLabel) -> bool {
        let had = self.contains(label);
        self.0 |= 1 << label.index();
        !had
    }

    pub fn remove(&mut self, label: SdohLabel) {
        self.0 &= !(1 << label.index());
    }

    pub fn contains(self, label: SdohLabel) -> bool {
        self.0 & (1 << label.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Labels in canonical order.
    pub fn iter(self) -> impl Iterator<Item = SdohLabel> {
        SdohLabel::ALL
            .into_iter()
            .filter(move |l| self.contains(*l))
    }

    /// Every one of the 64 possible label sets, ordered by bit pattern.
    pub fn all_subsets() -> impl Iterator<Item = LabelSet> {
        (0u8..64).map(LabelSet)
    }

    /// Comma separated names, or `-` for the empty set.
    pub fn to_prompt_string(self) -> String {
        if self.is_empty() {
            NO_SDOH_TOKEN.to_string()
        } else {
            self.iter()
                .map(SdohLabel::as_str)
                .collect::<Vec<_>>()
                .join(", ")
        }
    }

    /// Label names as owned strings, canonical order.
    pub fn names(self) -> Vec<&'static str> {
        self.iter().map(SdohLabel::as_str).collect()
    }
}

impl FromIterator<SdohLabel> for LabelSet {
    fn from_iter<I: IntoIterator<Item = SdohLabel>>(iter: I) -> Self {
        let mut s = LabelSet::new();
        for l in iter {
            s.insert(l);
        }
        s
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_prompt_string())
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.len()))?;
        for l in self.iter() {
            seq.serialize_element(l.as_str())?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct LabelsVisitor;

        impl<'de> Visitor<'de> for LabelsVisitor {
            type Value = LabelSet;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an array of lowercase SDoH label names")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<LabelSet, A::Error> {
                let mut set = LabelSet::new();
                while let Some(name) = seq.next_element::<String>()? {
                    let label = name.parse::<SdohLabel>().map_err(de::Error::custom)?;
                    set.insert(label);
                }
                Ok(set)
            }
        }

        deserializer.deserialize_seq(LabelsVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_six_lowercase_names() {
        assert_eq!(SdohLabel::ALL.len(), SdohLabel::COUNT);
        for l in SdohLabel::ALL {
            assert_eq!(l.as_str(), l.as_str().to_lowercase());
            assert_eq!(l.as_str().parse::<SdohLabel>().unwrap(), l);
        }
        assert!("Housing".parse::<SdohLabel>().is_err());
    }

    #[test]
    fn set_semantics() {
        let mut s = LabelSet::new();
        assert!(s.insert(SdohLabel::Parent));
        assert!(!s.insert(SdohLabel::Parent));
        s.insert(SdohLabel::Housing);
        assert_eq!(s.len(), 2);
        assert_eq!(s.to_prompt_string(), "housing, parent");
        assert_eq!(LabelSet::EMPTY.to_prompt_string(), "-");
        assert_eq!(LabelSet::all_subsets().count(), 64);
    }

    #[test]
    fn serde_as_array() {
        let s: LabelSet = [SdohLabel::Support, SdohLabel::Employment]
            .into_iter()
            .collect();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"["employment","support"]"#);
        assert_eq!(serde_json::from_str::<LabelSet>(&j).unwrap(), s);
        assert!(serde_json::from_str::<LabelSet>(r#"["wealth"]"#).is_err());
    }
}
