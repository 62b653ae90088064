use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{FeatureConfig, FeatureKind, MED_ENTS, ONTONOTES_ENTS, UPOS_TAGS};
use super::FeatureError;
use crate::util::fnv1a;

/// Longest wordpiece, in characters, produced by [`wordpieces`].
pub const DEFAULT_MAX_PIECE_CHARS: usize = 6;

/// Splits on whitespace; punctuation characters become their own words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() && ch != '\'' && ch != '-' {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Lowercases each word and cuts it into pieces of at most `max_chars`
/// characters; continuation pieces carry a `##` prefix. Returns the pieces and
/// each word's piece range.
pub fn wordpieces(words: &[String], max_chars: usize) -> (Vec<String>, Vec<Range<usize>>) {
    let max_chars = max_chars.max(1);
    let mut pieces = Vec::new();
    let mut spans = Vec::with_capacity(words.len());
    for w in words {
        let start = pieces.len();
        let chars: Vec<char> = w.to_lowercase().chars().collect();
        for (i, chunk) in chars.chunks(max_chars).enumerate() {
            let s: String = chunk.iter().collect();
            pieces.push(if i == 0 { s } else { format!("##{s}") });
        }
        spans.push(start..pieces.len());
    }
    (pieces, spans)
}

/// Tags for one word from the linguistic taggers. `None` means the group has
/// no tag for this word (for example no named entity).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordTags {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dep_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub med_ent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tok_sdoh: Option<String>,
}

impl WordTags {
    fn merge(&mut self, other: WordTags, groups: &[FeatureKind]) {
        for g in groups {
            match g {
                FeatureKind::Pos => self.pos = other.pos.clone(),
                FeatureKind::Dep => self.dep_depth = other.dep_depth,
                FeatureKind::Ent => self.ent = other.ent.clone(),
                FeatureKind::MedEnt => self.med_ent = other.med_ent.clone(),
                FeatureKind::TokSdoh => self.tok_sdoh = other.tok_sdoh.clone(),
                FeatureKind::CuiEmb => {}
            }
        }
    }
}

/// Word-level tags projected onto one wordpiece.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAnnotation {
    pub wordpiece_index: usize,
    #[serde(flatten)]
    pub tags: WordTags,
}

/// A linked concept over a wordpiece span `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuiAnnotation {
    pub cui: String,
    pub preferred_name: String,
    #[serde(default)]
    pub definition: String,
    pub start: usize,
    pub end: usize,
}

impl CuiAnnotation {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A concept reported by a linker over a word span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordConcept {
    pub cui: String,
    pub preferred_name: String,
    /// All known definitions; the first one is used.
    #[serde(default)]
    pub definitions: Vec<String>,
    pub start: usize,
    pub end: usize,
}

/// Keeps non-overlapping spans, longest first, then earliest start.
pub fn resolve_overlaps(mut concepts: Vec<CuiAnnotation>) -> Vec<CuiAnnotation> {
    concepts.sort_by(|a, b| {
        b.len()
            .cmp(&a.len())
            .then(a.start.cmp(&b.start))
            .then_with(|| a.cui.cmp(&b.cui))
            .then_with(|| a.preferred_name.cmp(&b.preferred_name))
            .then_with(|| a.definition.cmp(&b.definition))
    });
    let mut kept: Vec<CuiAnnotation> = Vec::new();
    for c in concepts {
        if !c.is_empty() && kept.iter().all(|k| c.end <= k.start || c.start >= k.end) {
            kept.push(c);
        }
    }
    kept.sort_by_key(|c| c.start);
    kept
}

/// Sentence-level output of annotation, aligned to wordpieces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub wordpieces: Vec<String>,
    pub tokens: Vec<TokenAnnotation>,
    pub concepts: Vec<CuiAnnotation>,
}

/// A linguistic tagger. One tagger may provide several groups.
pub trait TokenTagger: Send + Sync {
    fn groups(&self) -> &[FeatureKind];
    fn tag(&self, words: &[String]) -> Result<Vec<WordTags>, FeatureError>;
    /// Whether concurrent calls are allowed. Non-reentrant adapters are
    /// called from one thread at a time.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// A medical entity linker.
pub trait ConceptLinker: Send + Sync {
    fn link(&self, words: &[String]) -> Result<Vec<WordConcept>, FeatureError>;
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Deterministic rule-and-hash tagger for tests and annotator-free runs.
/// Tags always fall inside the default vocabularies.
pub struct StubTagger {
    groups: Vec<FeatureKind>,
    sdoh_lexicon: HashMap<&'static str, &'static str>,
}

impl Default for StubTagger {
    fn default() -> Self {
        let mut sdoh_lexicon = HashMap::new();
        for (words, tag) in [
            (
                &[
                    "homeless",
                    "shelter",
                    "apartment",
                    "housing",
                    "evicted",
                    "eviction",
                ][..],
                "housing",
            ),
            (
                &[
                    "bus",
                    "ride",
                    "car",
                    "drive",
                    "transport",
                    "transportation",
                    "taxi",
                ][..],
                "transportation",
            ),
            (
                &[
                    "wife", "husband", "married", "divorced", "widowed", "partner", "single",
                ][..],
                "relationship",
            ),
            (
                &["son", "daughter", "children", "child", "kids", "baby"][..],
                "parent",
            ),
            (
                &[
                    "works",
                    "job",
                    "employed",
                    "unemployed",
                    "retired",
                    "student",
                    "work",
                ][..],
                "employment",
            ),
            (
                &[
                    "supportive",
                    "helps",
                    "support",
                    "cares",
                    "caring",
                    "visits",
                ][..],
                "support",
            ),
        ] {
            for w in words {
                sdoh_lexicon.insert(*w, tag);
            }
        }
        StubTagger {
            groups: FeatureKind::CATEGORICAL.to_vec(),
            sdoh_lexicon,
        }
    }
}

impl TokenTagger for StubTagger {
    fn groups(&self) -> &[FeatureKind] {
        &self.groups
    }

    fn tag(&self, words: &[String]) -> Result<Vec<WordTags>, FeatureError> {
        Ok(words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let lower = w.to_lowercase();
                let h = fnv1a(&lower);
                let pos = if w.chars().all(|c| c.is_ascii_punctuation()) {
                    "PUNCT"
                } else if w.chars().all(|c| c.is_ascii_digit()) {
                    "NUM"
                } else {
                    UPOS_TAGS[(h % UPOS_TAGS.len() as u64) as usize]
                };
                let ent = (i > 0 && w.chars().next().is_some_and(char::is_uppercase)).then(|| {
                    ONTONOTES_ENTS[(h % ONTONOTES_ENTS.len() as u64) as usize].to_string()
                });
                WordTags {
                    pos: Some(pos.to_string()),
                    dep_depth: Some((h >> 8) as usize % 6),
                    ent,
                    med_ent: (lower.len() > 7).then(|| MED_ENTS[0].to_string()),
                    tok_sdoh: self.sdoh_lexicon.get(lower.as_str()).map(|t| t.to_string()),
                }
            })
            .collect())
    }
}

/// Phrase lexicon linker: exact lowercase word-sequence matches.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LexiconLinker {
    pub entries: Vec<LexiconEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub phrase: String,
    pub cui: String,
    pub preferred_name: String,
    #[serde(default)]
    pub definitions: Vec<String>,
}

impl LexiconLinker {
    /// A one-entry lexicon: "ran away" links to C0019863.
    pub fn builtin() -> Self {
        LexiconLinker {
            entries: vec![LexiconEntry {
                phrase: "ran away".into(),
                cui: "C0019863".into(),
                preferred_name: "Ran away, life event".into(),
                definitions: Vec::new(),
            }],
        }
    }

    /// Reads a JSON array of lexicon entries.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| FeatureError::Config(e.to_string()))?;
        let entries =
            serde_json::from_str(&text).map_err(|e| FeatureError::Config(e.to_string()))?;
        Ok(LexiconLinker { entries })
    }
}

impl ConceptLinker for LexiconLinker {
    fn link(&self, words: &[String]) -> Result<Vec<WordConcept>, FeatureError> {
        let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
        let mut out = Vec::new();
        for e in &self.entries {
            let phrase: Vec<&str> = e.phrase.split_whitespace().collect();
            if phrase.is_empty() || phrase.len() > lower.len() {
                continue;
            }
            for start in 0..=lower.len() - phrase.len() {
                if lower[start..start + phrase.len()]
                    .iter()
                    .zip(&phrase)
                    .all(|(a, b)| a == b)
                {
                    out.push(WordConcept {
                        cui: e.cui.clone(),
                        preferred_name: e.preferred_name.clone(),
                        definitions: e.definitions.clone(),
                        start,
                        end: start + phrase.len(),
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Precomputed annotations for one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub id: String,
    pub words: Vec<String>,
    /// Group name to per-word tag list; `null` entries mean no tag.
    #[serde(default)]
    pub tags: BTreeMap<String, Vec<Option<serde_json::Value>>>,
    #[serde(default)]
    pub concepts: Vec<WordConcept>,
}

/// JSONL annotation sidecar keyed by record id.
#[derive(Debug, Clone, Default)]
pub struct Sidecar {
    entries: HashMap<String, SidecarEntry>,
}

impl Sidecar {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let file = File::open(path).map_err(|e| FeatureError::Config(e.to_string()))?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| FeatureError::Config(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: SidecarEntry = serde_json::from_str(&line)
                .map_err(|e| FeatureError::Config(format!("sidecar line {}: {e}", i + 1)))?;
            entries.insert(entry.id.clone(), entry);
        }
        Ok(Sidecar { entries })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = SidecarEntry>) -> Self {
        Sidecar {
            entries: entries.into_iter().map(|e| (e.id.clone(), e)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&SidecarEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl SidecarEntry {
    fn word_tags(&self) -> Result<(Vec<WordTags>, Vec<FeatureKind>), FeatureError> {
        let mut out = vec![WordTags::default(); self.words.len()];
        let mut provided = Vec::new();
        for (name, values) in &self.tags {
            let kind: FeatureKind = name.parse()?;
            if values.len() != self.words.len() {
                return Err(FeatureError::Alignment(format!(
                    "sidecar `{}`: {} `{name}` tags for {} words",
                    self.id,
                    values.len(),
                    self.words.len()
                )));
            }
            provided.push(kind);
            for (tags, v) in out.iter_mut().zip(values) {
                let as_str = || v.as_ref().and_then(|v| v.as_str()).map(String::from);
                match kind {
                    FeatureKind::Pos => tags.pos = as_str(),
                    FeatureKind::Ent => tags.ent = as_str(),
                    FeatureKind::MedEnt => tags.med_ent = as_str(),
                    FeatureKind::TokSdoh => tags.tok_sdoh = as_str(),
                    FeatureKind::Dep => {
                        tags.dep_depth = v.as_ref().and_then(|v| v.as_u64()).map(|d| d as usize)
                    }
                    FeatureKind::CuiEmb => {}
                }
            }
        }
        Ok((out, provided))
    }
}

/// Runs the configured adapters and aligns their output to wordpieces.
/// Sidecar entries take precedence over live adapters for the records they
/// cover.
pub struct Annotator {
    pub config: FeatureConfig,
    pub taggers: Vec<Box<dyn TokenTagger>>,
    pub linker: Option<Box<dyn ConceptLinker>>,
    pub sidecar: Option<Sidecar>,
    pub max_piece_chars: usize,
}

impl Annotator {
    pub fn new(config: FeatureConfig) -> Self {
        Annotator {
            config,
            taggers: Vec::new(),
            linker: None,
            sidecar: None,
            max_piece_chars: DEFAULT_MAX_PIECE_CHARS,
        }
    }

    /// Stub tagger and the built-in lexicon linker.
    pub fn with_stubs(config: FeatureConfig) -> Self {
        let mut a = Self::new(config);
        a.taggers.push(Box::new(StubTagger::default()));
        a.linker = Some(Box::new(LexiconLinker::builtin()));
        a
    }

    pub fn concurrent_safe(&self) -> bool {
        self.taggers.iter().all(|t| t.concurrent_safe())
            && self.linker.as_ref().is_none_or(|l| l.concurrent_safe())
    }

    fn provided_by_adapters(&self) -> Vec<FeatureKind> {
        let mut kinds: Vec<FeatureKind> = self
            .taggers
            .iter()
            .flat_map(|t| t.groups().iter().copied())
            .collect();
        if self.linker.is_some() {
            kinds.push(FeatureKind::CuiEmb);
        }
        kinds
    }

    fn check_available(&self, provided: &[FeatureKind]) -> Result<(), FeatureError> {
        for kind in &self.config.enabled {
            if !provided.contains(kind) && !self.config.is_optional(*kind) {
                return Err(FeatureError::UnavailableAdapter(*kind));
            }
        }
        Ok(())
    }

    pub fn annotate(
        &self,
        id: Option<&str>,
        text: &str,
    ) -> Result<AnnotatedSentence, FeatureError> {
        if text.trim().is_empty() {
            return Err(FeatureError::EmptyText);
        }
        let (words, tags, concepts) = match id.and_then(|id| self.sidecar.as_ref()?.get(id)) {
            Some(entry) => {
                let (tags, mut provided) = entry.word_tags()?;
                provided.push(FeatureKind::CuiEmb);
                self.check_available(&provided)?;
                (entry.words.clone(), tags, entry.concepts.clone())
            }
            None => {
                self.check_available(&self.provided_by_adapters())?;
                let words = tokenize(text);
                let mut tags = vec![WordTags::default(); words.len()];
                for tagger in &self.taggers {
                    let groups: Vec<FeatureKind> = tagger
                        .groups()
                        .iter()
                        .copied()
                        .filter(|g| self.config.is_enabled(*g))
                        .collect();
                    if groups.is_empty() {
                        continue;
                    }
                    let out = tagger.tag(&words)?;
                    if out.len() != words.len() {
                        return Err(FeatureError::Alignment(format!(
                            "tagger returned {} tags for {} words",
                            out.len(),
                            words.len()
                        )));
                    }
                    for (t, o) in tags.iter_mut().zip(out) {
                        t.merge(o, &groups);
                    }
                }
                let concepts = match (&self.linker, self.config.is_enabled(FeatureKind::CuiEmb)) {
                    (Some(linker), true) => linker.link(&words)?,
                    _ => Vec::new(),
                };
                (words, tags, concepts)
            }
        };
        if words.is_empty() {
            return Err(FeatureError::EmptyText);
        }

        let (pieces, spans) = wordpieces(&words, self.max_piece_chars);
        let mut tokens = Vec::with_capacity(pieces.len());
        for (word_tags, span) in tags.iter().zip(&spans) {
            for wp in span.clone() {
                tokens.push(TokenAnnotation {
                    wordpiece_index: wp,
                    tags: word_tags.clone(),
                });
            }
        }
        let mut cuis = Vec::with_capacity(concepts.len());
        for c in concepts {
            if c.start >= c.end || c.end > spans.len() {
                return Err(FeatureError::Alignment(format!(
                    "concept {} spans words {}..{} of {}",
                    c.cui,
                    c.start,
                    c.end,
                    spans.len()
                )));
            }
            cuis.push(CuiAnnotation {
                definition: c.definitions.first().cloned().unwrap_or_default(),
                cui: c.cui,
                preferred_name: c.preferred_name,
                start: spans[c.start].start,
                end: spans[c.end - 1].end,
            });
        }
        Ok(AnnotatedSentence {
            wordpieces: pieces,
            tokens,
            concepts: resolve_overlaps(cuis),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            words("Pt lives in Arlington."),
            ["Pt", "lives", "in", "Arlington", "."]
        );
        assert_eq!(words("  a  b "), ["a", "b"]);
    }

    #[test]
    fn wordpieces_cover_words() {
        let (pieces, spans) = wordpieces(&words("homelessness now"), 6);
        assert_eq!(pieces, ["homele", "##ssness", "now"]);
        assert_eq!(spans, vec![0..2, 2..3]);
    }

    #[test]
    fn ran_away_links_to_homelessness_concept() {
        let a = Annotator::with_stubs(FeatureConfig::default());
        let s = a.annotate(None, "Pt ran away from home.").unwrap();
        assert_eq!(s.concepts.len(), 1);
        let c = &s.concepts[0];
        assert_eq!(c.cui, "C0019863");
        assert_eq!(c.preferred_name, "Ran away, life event");
        assert_eq!(c.definition, "");
        assert_eq!(&s.wordpieces[c.span()], ["ran", "away"]);
    }

    #[test]
    fn no_concepts_gives_empty_list() {
        let a = Annotator::with_stubs(FeatureConfig::default());
        assert!(a
            .annotate(None, "Vitals stable overnight.")
            .unwrap()
            .concepts
            .is_empty());
    }

    #[test]
    fn stub_tags_are_deterministic_and_repeated_over_wordpieces() {
        let a = Annotator::with_stubs(FeatureConfig::default());
        let x = a.annotate(None, "a b c").unwrap();
        let y = a.annotate(None, "a b c").unwrap();
        assert_eq!(x, y);
        assert_eq!(x.tokens.len(), 3);
        let long = a.annotate(None, "unemployment").unwrap();
        assert_eq!(long.wordpieces.len(), 2);
        assert_eq!(long.tokens[0].tags, long.tokens[1].tags);
    }

    #[test]
    fn missing_adapter_is_an_error_unless_optional() {
        let cfg = FeatureConfig::default();
        let bare = Annotator::new(cfg.clone());
        assert!(matches!(
            bare.annotate(None, "x"),
            Err(FeatureError::UnavailableAdapter(FeatureKind::Pos))
        ));
        let mut optional = cfg;
        optional.optional = FeatureKind::ALL.to_vec();
        let a = Annotator::new(optional);
        let s = a.annotate(None, "x y").unwrap();
        assert!(s.tokens.iter().all(|t| t.tags == WordTags::default()));
    }

    #[test]
    fn overlaps_resolve_longest_then_earliest() {
        let c = |cui: &str, start, end| CuiAnnotation {
            cui: cui.into(),
            preferred_name: cui.into(),
            definition: String::new(),
            start,
            end,
        };
        let kept = resolve_overlaps(vec![c("A", 0, 2), c("B", 1, 4), c("C", 4, 6), c("D", 5, 7)]);
        let ids: Vec<&str> = kept.iter().map(|k| k.cui.as_str()).collect();
        assert_eq!(ids, ["B", "C"]);
    }

    #[test]
    fn sidecar_overrides_live_adapters() {
        let entry = SidecarEntry {
            id: "s1".into(),
            words: vec!["Lives".into(), "alone".into()],
            tags: [
                (
                    "pos".to_string(),
                    vec![
                        Some(serde_json::json!("VERB")),
                        Some(serde_json::json!("ADV")),
                    ],
                ),
                (
                    "dep".to_string(),
                    vec![Some(serde_json::json!(0)), Some(serde_json::json!(1))],
                ),
                ("ent".to_string(), vec![None, None]),
                ("med_ent".to_string(), vec![None, None]),
                (
                    "tok_sdoh".to_string(),
                    vec![None, Some(serde_json::json!("relationship"))],
                ),
            ]
            .into_iter()
            .collect(),
            concepts: vec![WordConcept {
                cui: "C1".into(),
                preferred_name: "Lives alone".into(),
                definitions: vec!["first".into(), "second".into()],
                start: 0,
                end: 2,
            }],
        };
        let mut a = Annotator::new(FeatureConfig::default());
        a.sidecar = Some(Sidecar::from_entries([entry]));
        let s = a.annotate(Some("s1"), "Lives alone.").unwrap();
        assert_eq!(s.wordpieces, ["lives", "alone"]);
        assert_eq!(s.tokens[0].tags.pos.as_deref(), Some("VERB"));
        assert_eq!(s.tokens[1].tags.dep_depth, Some(1));
        assert_eq!(s.concepts[0].definition, "first");
        // no sidecar entry and no live adapters
        assert!(a.annotate(Some("other"), "x").is_err());
    }
}
