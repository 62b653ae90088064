//! Sentence-level corpora: JSONL ingestion, validation, merging and label
//! statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::label::{LabelSet, SdohLabel};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate record id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: unknown label `{token}` (expected one of housing, transportation, relationship, parent, employment, support)")]
    UnknownLabel { line: usize, token: String },
    #[error("line {line}: record `{id}` has empty text")]
    EmptyText { line: usize, id: String },
    #[error(
        "id collision on `{0}` cannot be resolved by namespacing (both records share a source tag)"
    )]
    UnresolvableCollision(String),
}

#[derive(
    Debug,
    Clone,
    Copy,
    Default,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    schemars::JsonSchema,
)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Base,
    Synthetic,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Base => "base",
            Source::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Source::Base),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(format!(
                "unknown source tag `{other}` (expected base or synthetic)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub text: String,
    #[serde(rename = "labels")]
    pub gold: LabelSet,
    #[serde(default)]
    pub source: Source,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    records: Vec<SentenceRecord>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    labels: Vec<String>,
    #[serde(default)]
    source: Option<String>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and blank text.
    pub fn new(
        name: impl Into<String>,
        records: Vec<SentenceRecord>,
    ) -> Result<Self, DatasetError> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.text.trim().is_empty() {
                return Err(DatasetError::EmptyText {
                    line: i + 1,
                    id: r.id.clone(),
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId {
                    line: i + 1,
                    id: r.id.clone(),
                });
            }
        }
        Ok(Corpus {
            name: name.into(),
            records,
        })
    }

    pub fn records(&self) -> &[SentenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SentenceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    /// Records for the given ids, in the order of `ids`. Unknown ids are skipped.
    pub fn select<'a>(&'a self, ids: &[String]) -> Vec<&'a SentenceRecord> {
        let index = self.index();
        ids.iter()
            .filter_map(|id| index.get(id.as_str()).map(|&i| &self.records[i]))
            .collect()
    }

    /// A new corpus holding the records for `ids`, in the order of `ids`.
    pub fn subset(&self, ids: &[String]) -> Corpus {
        Corpus {
            name: self.name.clone(),
            records: self.select(ids).into_iter().cloned().collect(),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn golds(&self) -> Vec<LabelSet> {
        self.records.iter().map(|r| r.gold).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Parses JSONL records. When `source` is given it tags every record,
/// otherwise the per-line `source` field applies (default base).
pub fn read_corpus<R: BufRead>(
    reader: R,
    name: &str,
    source: Option<Source>,
) -> Result<Corpus, DatasetError> {
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.text.trim().is_empty() {
            return Err(DatasetError::EmptyText {
                line: line_no,
                id: raw.id,
            });
        }
        let mut gold = LabelSet::new();
        for token in &raw.labels {
            let label = token
                .parse::<SdohLabel>()
                .map_err(|_| DatasetError::UnknownLabel {
                    line: line_no,
                    token: token.clone(),
                })?;
            gold.insert(label);
        }
        let record_source = match (source, raw.source.as_deref()) {
            (Some(s), _) => s,
            (None, Some(tag)) => tag.parse().map_err(|message| DatasetError::Parse {
                line: line_no,
                message,
            })?,
            (None, None) => Source::Base,
        };
        if !seen.insert(raw.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: raw.id,
            });
        }
        records.push(SentenceRecord {
            id: raw.id,
            text: raw.text,
            gold,
            source: record_source,
        });
    }
    Ok(Corpus {
        name: name.to_string(),
        records,
    })
}

pub fn load_corpus(path: impl AsRef<Path>, source: Option<Source>) -> Result<Corpus, DatasetError> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_corpus(BufReader::new(File::open(path)?), &name, source)
}

/// Concatenates two corpora. Colliding ids are namespaced with their
/// record's source tag (`base:s1`, `synthetic:s1`).
pub fn merge_corpora(a: &Corpus, b: &Corpus) -> Result<Corpus, DatasetError> {
    let a_ids: HashSet<&str> = a.records.iter().map(|r| r.id.as_str()).collect();
    let clashes: HashSet<&str> = b
        .records
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| a_ids.contains(id))
        .collect();

    let rename = |r: &SentenceRecord| {
        let mut r = r.clone();
        if clashes.contains(r.id.as_str()) {
            r.id = format!("{}:{}", r.source, r.id);
        }
        r
    };
    let records: Vec<SentenceRecord> = a.records.iter().chain(&b.records).map(rename).collect();

    let mut seen = HashSet::with_capacity(records.len());
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(DatasetError::UnresolvableCollision(r.id.clone()));
        }
    }
    let name = match (a.name.is_empty(), b.name.is_empty()) {
        (true, _) => b.name.clone(),
        (_, true) => a.name.clone(),
        _ => format!("{}+{}", a.name, b.name),
    };
    Ok(Corpus { name, records })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelCountRow {
    pub records: usize,
    pub per_label: [usize; SdohLabel::COUNT],
    pub empty: usize,
}

impl LabelCountRow {
    fn add(&mut self, gold: LabelSet) {
        self.records += 1;
        if gold.is_empty() {
            self.empty += 1;
        }
        for l in gold.iter() {
            self.per_label[l.index()] += 1;
        }
    }

    pub fn non_empty(&self) -> usize {
        self.records - self.empty
    }

    pub fn count(&self, label: SdohLabel) -> usize {
        self.per_label[label.index()]
    }
}

/// Per-label and per-source counts for a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub total: LabelCountRow,
    pub per_source: BTreeMap<Source, LabelCountRow>,
    /// Distinct sentence texts that occur under more than one source tag.
    pub cross_source_duplicate_texts: usize,
}

pub fn corpus_stats(c: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats::default();
    let mut sources_by_text: HashMap<&str, HashSet<Source>> = HashMap::new();
    for r in &c.records {
        stats.total.add(r.gold);
        stats.per_source.entry(r.source).or_default().add(r.gold);
        sources_by_text
            .entry(r.text.trim())
            .or_default()
            .insert(r.source);
    }
    stats.cross_source_duplicate_texts = sources_by_text.values().filter(|s| s.len() > 1).count();
    stats
}

impl CorpusStats {
    fn rows(&self) -> Vec<(String, &LabelCountRow)> {
        let mut rows: Vec<(String, &LabelCountRow)> = self
            .per_source
            .iter()
            .map(|(s, r)| (s.to_string(), r))
            .collect();
        rows.push(("total".to_string(), &self.total));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["source".to_string(), "records".to_string()];
        header.extend(SdohLabel::ALL.iter().map(|l| l.to_string()));
        header.push("no_sdoh".to_string());
        w.write_record(&header).expect("in-memory csv");
        for (name, row) in self.rows() {
            let mut rec = vec![name, row.records.to_string()];
            rec.extend(row.per_label.iter().map(|c| c.to_string()));
            rec.push(row.empty.to_string());
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>8}", "source", "records");
        for l in SdohLabel::ALL {
            out.push_str(&format!(" {:>14}", l.as_str()));
        }
        out.push_str(&format!(" {:>8}\n", "no_sdoh"));
        for (name, row) in self.rows() {
            out.push_str(&format!("{:<10} {:>8}", name, row.records));
            for c in row.per_label {
                out.push_str(&format!(" {:>14}", c));
            }
            out.push_str(&format!(" {:>8}\n", row.empty));
        }
        out.push_str(&format!(
            "cross-source duplicate texts: {}\n",
            self.cross_source_duplicate_texts
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, labels: &[SdohLabel], source: Source) -> SentenceRecord {
        SentenceRecord {
            id: id.into(),
            text: format!("sentence {id}"),
            gold: labels.iter().copied().collect(),
            source,
        }
    }

    #[test]
    fn parses_documented_example() {
        let line = r#"{"id":"s1","text":"Pt lives in Arlington.","labels":["housing"]}"#;
        let c = read_corpus(line.as_bytes(), "t", None).unwrap();
        assert_eq!(c.len(), 1);
        let r = &c.records()[0];
        assert_eq!(r.text, "Pt lives in Arlington.");
        assert_eq!(r.gold, [SdohLabel::Housing].into_iter().collect());
        assert_eq!(r.source, Source::Base);
    }

    #[test]
    fn empty_labels_are_empty_set() {
        let line = r#"{"id":"s2","text":"Vitals stable.","labels":[]}"#;
        let c = read_corpus(line.as_bytes(), "t", Some(Source::Synthetic)).unwrap();
        assert!(c.records()[0].gold.is_empty());
        assert_eq!(c.records()[0].source, Source::Synthetic);
    }

    #[test]
    fn duplicate_id_is_named() {
        let data = "{\"id\":\"a\",\"text\":\"x\",\"labels\":[]}\n\
                    {\"id\":\"b\",\"text\":\"y\",\"labels\":[]}\n\
                    {\"id\":\"a\",\"text\":\"z\",\"labels\":[]}\n";
        match read_corpus(data.as_bytes(), "t", None) {
            Err(e @ DatasetError::DuplicateId { line: 3, .. }) => {
                assert!(e.to_string().contains("`a`"))
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_and_unknown_label() {
        let data = "{\"id\":\"a\",\"text\":\"x\",\"labels\":[]}\nnot json\n";
        assert!(matches!(
            read_corpus(data.as_bytes(), "t", None),
            Err(DatasetError::Parse { line: 2, .. })
        ));
        let data = "{\"id\":\"a\",\"text\":\"x\",\"labels\":[\"housing\",\"wealth\"]}\n";
        match read_corpus(data.as_bytes(), "t", None) {
            Err(e @ DatasetError::UnknownLabel { .. }) => assert!(e.to_string().contains("wealth")),
            other => panic!("{other:?}"),
        }
        let data = "{\"id\":\"a\",\"text\":\"   \",\"labels\":[]}\n";
        assert!(matches!(
            read_corpus(data.as_bytes(), "t", None),
            Err(DatasetError::EmptyText { .. })
        ));
    }

    #[test]
    fn merge_counts_add_up() {
        let base: Vec<_> = (0..5355)
            .map(|i| {
                let labels: &[SdohLabel] = if i % 40 == 0 {
                    &[SdohLabel::Housing]
                } else {
                    &[]
                };
                rec(&format!("b{i}"), labels, Source::Base)
            })
            .collect();
        let syn: Vec<_> = (0..588)
            .map(|i| {
                rec(
                    &format!("s{i}"),
                    &[SdohLabel::Housing, SdohLabel::Support],
                    Source::Synthetic,
                )
            })
            .collect();
        let a = Corpus::new("base", base).unwrap();
        let b = Corpus::new("synthetic", syn).unwrap();
        let m = merge_corpora(&a, &b).unwrap();
        assert_eq!(m.len(), 5_943);
        let (sa, sb, sm) = (corpus_stats(&a), corpus_stats(&b), corpus_stats(&m));
        for l in SdohLabel::ALL {
            assert_eq!(sm.total.count(l), sa.total.count(l) + sb.total.count(l));
        }
        assert_eq!(
            merge_corpora(&a, &Corpus::default()).unwrap().records(),
            a.records()
        );
    }

    #[test]
    fn merge_namespaces_collisions() {
        let a = Corpus::new("a", vec![rec("x", &[], Source::Base)]).unwrap();
        let b = Corpus::new("b", vec![rec("x", &[], Source::Synthetic)]).unwrap();
        let m = merge_corpora(&a, &b).unwrap();
        let ids: Vec<_> = m.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["base:x", "synthetic:x"]);
        let a2 = Corpus::new("a", vec![rec("x", &[], Source::Base)]).unwrap();
        assert!(matches!(
            merge_corpora(&a, &a2),
            Err(DatasetError::UnresolvableCollision(_))
        ));
    }

    #[test]
    fn stats_on_small_and_empty() {
        let c = Corpus::new(
            "t",
            vec![
                rec("1", &[SdohLabel::Housing], Source::Base),
                rec(
                    "2",
                    &[SdohLabel::Housing, SdohLabel::Transportation],
                    Source::Base,
                ),
                rec("3", &[SdohLabel::Housing], Source::Synthetic),
                rec("4", &[], Source::Base),
            ],
        )
        .unwrap();
        let s = corpus_stats(&c);
        assert_eq!(s.total.count(SdohLabel::Housing), 3);
        assert_eq!(s.total.empty, 1);
        assert_eq!(s.per_source[&Source::Synthetic].records, 1);
        assert!(s.to_csv().starts_with("source,records,housing"));
        let e = corpus_stats(&Corpus::default());
        assert_eq!(e.total, LabelCountRow::default());
    }

    #[test]
    fn stats_report_cross_source_duplicates() {
        let mut a = rec("1", &[], Source::Base);
        let mut b = rec("2", &[], Source::Synthetic);
        a.text = "same".into();
        b.text = "same".into();
        let c = Corpus::new("t", vec![a, b]).unwrap();
        assert_eq!(corpus_stats(&c).cross_source_duplicate_texts, 1);
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        prop::collection::vec((0u8..64, any::<bool>(), "[a-zA-Z ,.\"é]{1,30}"), 0..100).prop_map(
            |rows| {
                let records = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (bits, syn, text))| SentenceRecord {
                        id: format!("r{i}"),
                        text: format!("t{text}"),
                        gold: LabelSet::from_bits(bits).unwrap(),
                        source: if syn { Source::Synthetic } else { Source::Base },
                    })
                    .collect();
                Corpus::new("p", records).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn stats_match_linear_scan(c in arb_corpus()) {
            let s = corpus_stats(&c);
            for l in SdohLabel::ALL {
                let mut n = 0;
                for r in c.records() {
                    if r.gold.contains(l) {
                        n += 1;
                    }
                }
                prop_assert_eq!(s.total.count(l), n);
            }
            let empty = c.records().iter().filter(|r| r.gold.is_empty()).count();
            prop_assert_eq!(s.total.empty, empty);
            prop_assert_eq!(s.total.empty + s.total.non_empty(), c.len());
            prop_assert!(s.total.per_label.iter().sum::<usize>() >= s.total.non_empty());
        }

        #[test]
        fn jsonl_round_trip(c in arb_corpus()) {
            let mut buf = Vec::new();
            c.write_jsonl(&mut buf).unwrap();
            let back = read_corpus(buf.as_slice(), "p", None).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
