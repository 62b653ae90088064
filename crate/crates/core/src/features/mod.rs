//! Per-wordpiece feature matrices: encoder output, stacked concept
//! embeddings and one-hot linguistic groups.

mod annotate;
mod config;
mod embed;

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

pub use annotate::{
    resolve_overlaps, tokenize, wordpieces, AnnotatedSentence, Annotator, ConceptLinker,
    CuiAnnotation, LexiconEntry, LexiconLinker, Sidecar, SidecarEntry, StubTagger, TokenAnnotation,
    TokenTagger, WordConcept, WordTags, DEFAULT_MAX_PIECE_CHARS,
};
pub use config::{
    feature_set_name, parse_feature_set, FeatureConfig, FeatureKind, DEFAULT_DEP_CAP, MED_ENTS,
    ONTONOTES_ENTS, TOKEN_SDOH_TAGS, UPOS_TAGS,
};
pub use embed::{
    cui_text, embed_cui, embedder_from_id, CommandEmbedder, HashEmbedder, SentenceEmbedder,
};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("feature config: {0}")]
    Config(String),
    #[error("no adapter provides `{0}` and it is not marked optional")]
    UnavailableAdapter(FeatureKind),
    #[error("alignment: {0}")]
    Alignment(String),
    #[error("tag `{tag}` is not in the `{group}` vocabulary")]
    Vocabulary { group: FeatureKind, tag: String },
    #[error("embedding: {0}")]
    Embedding(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("sentence is empty")]
    EmptyText,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Concatenates matrices with equal row counts left to right.
    pub fn hcat(parts: &[&Matrix<T>]) -> Self {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Matrix { rows, cols, data }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct GroupWidth {
    pub kind: FeatureKind,
    pub width: usize,
}

/// Block widths in concatenation order: encoder, concept embedding, then the
/// enabled categorical groups in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct BlockLayout {
    pub encoder: usize,
    pub cui: usize,
    pub groups: Vec<GroupWidth>,
}

impl BlockLayout {
    pub fn new(encoder_dim: usize, cfg: &FeatureConfig) -> Self {
        BlockLayout {
            encoder: encoder_dim,
            cui: cfg.cui_width(),
            groups: FeatureKind::CATEGORICAL
                .iter()
                .filter(|k| cfg.is_enabled(**k))
                .map(|k| GroupWidth {
                    kind: *k,
                    width: cfg.group_width(*k),
                })
                .collect(),
        }
    }

    pub fn onehot(&self) -> usize {
        self.groups.iter().map(|g| g.width).sum()
    }

    /// Width of the static part (everything but the encoder block).
    pub fn static_width(&self) -> usize {
        self.cui + self.onehot()
    }

    pub fn total(&self) -> usize {
        self.encoder + self.static_width()
    }

    /// Column offset of each group inside the one-hot block.
    pub fn group_offsets(&self) -> Vec<(FeatureKind, usize, usize)> {
        let mut at = 0;
        self.groups
            .iter()
            .map(|g| {
                let o = (g.kind, at, g.width);
                at += g.width;
                o
            })
            .collect()
    }
}

/// The parts of a feature matrix that do not depend on the trainable encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticFeatures<T> {
    pub wordpieces: Vec<String>,
    pub cui_block: Matrix<T>,
    pub onehot_block: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub n_wordpieces: usize,
    pub wordpieces: Vec<String>,
    pub encoder_block: Matrix<T>,
    pub cui_block: Matrix<T>,
    pub onehot_block: Matrix<T>,
    pub block_layout: BlockLayout,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn from_static(s: StaticFeatures<T>, encoder_out: Matrix<T>) -> Result<Self, FeatureError> {
        let n = s.wordpieces.len();
        if encoder_out.rows != n {
            return Err(FeatureError::Shape(format!(
                "encoder output has {} rows for {n} wordpieces",
                encoder_out.rows
            )));
        }
        let block_layout = BlockLayout {
            encoder: encoder_out.cols,
            cui: s.cui_block.cols,
            groups: Vec::new(),
        };
        Ok(FeatureMatrix {
            n_wordpieces: n,
            wordpieces: s.wordpieces,
            encoder_block: encoder_out,
            cui_block: s.cui_block,
            onehot_block: s.onehot_block,
            block_layout,
        })
    }

    /// The concatenated `n × total` input.
    pub fn concat(&self) -> Matrix<T> {
        Matrix::hcat(&[&self.encoder_block, &self.cui_block, &self.onehot_block])
    }
}

fn onehot_index(
    cfg: &FeatureConfig,
    kind: FeatureKind,
    tags: &WordTags,
) -> Result<Option<usize>, FeatureError> {
    let tag = match kind {
        FeatureKind::Dep => return Ok(tags.dep_depth.map(|d| d.min(cfg.dep_cap))),
        FeatureKind::Pos => &tags.pos,
        FeatureKind::Ent => &tags.ent,
        FeatureKind::MedEnt => &tags.med_ent,
        FeatureKind::TokSdoh => &tags.tok_sdoh,
        FeatureKind::CuiEmb => return Ok(None),
    };
    let Some(tag) = tag else { return Ok(None) };
    let vocab = cfg
        .vocabularies
        .get(&kind)
        .map(Vec::as_slice)
        .unwrap_or(&[]);
    vocab
        .iter()
        .position(|v| v == tag)
        .map(Some)
        .ok_or_else(|| FeatureError::Vocabulary {
            group: kind,
            tag: tag.clone(),
        })
}

/// Builds the concept and one-hot blocks. Concept vectors are cached per
/// distinct `name:definition` string.
pub fn static_features<T: Real>(
    cfg: &FeatureConfig,
    embedder: &dyn SentenceEmbedder,
    sentence: &AnnotatedSentence,
) -> Result<StaticFeatures<T>, FeatureError> {
    let n = sentence.wordpieces.len();
    let layout = BlockLayout::new(0, cfg);

    let mut per_piece: Vec<Option<&WordTags>> = vec![None; n];
    for t in &sentence.tokens {
        let slot = per_piece.get_mut(t.wordpiece_index).ok_or_else(|| {
            FeatureError::Alignment(format!(
                "token annotation at wordpiece {} of {n}",
                t.wordpiece_index
            ))
        })?;
        match slot {
            Some(prev) if **prev != t.tags => {
                return Err(FeatureError::Alignment(format!(
                    "conflicting annotations for wordpiece {}",
                    t.wordpiece_index
                )))
            }
            _ => *slot = Some(&t.tags),
        }
    }
    let mut onehot = Matrix::zeros(n, layout.onehot());
    let offsets = layout.group_offsets();
    for (r, tags) in per_piece.iter().enumerate() {
        let Some(tags) = tags else { continue };
        for &(kind, offset, _) in &offsets {
            if let Some(i) = onehot_index(cfg, kind, tags)? {
                onehot.row_mut(r)[offset + i] = T::one();
            }
        }
    }

    let mut cui = Matrix::zeros(n, layout.cui);
    if layout.cui > 0 {
        if embedder.dim() != layout.cui {
            return Err(FeatureError::Shape(format!(
                "embedder `{}` has dim {} but cui_dim is {}",
                embedder.id(),
                embedder.dim(),
                layout.cui
            )));
        }
        for c in &sentence.concepts {
            if c.start >= c.end || c.end > n {
                return Err(FeatureError::Alignment(format!(
                    "concept {} span {}..{} of {n}",
                    c.cui, c.start, c.end
                )));
            }
        }
        let mut cache: HashMap<String, Vec<T>> = HashMap::new();
        for c in resolve_overlaps(sentence.concepts.clone()) {
            let key = cui_text(&c);
            if !cache.contains_key(&key) {
                let v = embed_cui(embedder, &c)?
                    .into_iter()
                    .map(T::from_f64_lossy)
                    .collect();
                cache.insert(key.clone(), v);
            }
            let v = &cache[&key];
            for r in c.span() {
                cui.row_mut(r).copy_from_slice(v);
            }
        }
    }
    Ok(StaticFeatures {
        wordpieces: sentence.wordpieces.clone(),
        cui_block: cui,
        onehot_block: onehot,
    })
}

/// Assembles the full matrix from annotations and encoder output.
pub fn assemble_features<T: Real>(
    cfg: &FeatureConfig,
    embedder: &dyn SentenceEmbedder,
    sentence: &AnnotatedSentence,
    encoder_out: Matrix<T>,
) -> Result<FeatureMatrix<T>, FeatureError> {
    let encoder_dim = encoder_out.cols;
    let s = static_features(cfg, embedder, sentence)?;
    let mut fm = FeatureMatrix::from_static(s, encoder_out)?;
    fm.block_layout = BlockLayout::new(encoder_dim, cfg);
    Ok(fm)
}

/// Annotation plus static feature construction for whole corpora.
pub struct Featurizer {
    pub annotator: Annotator,
    pub embedder: Box<dyn SentenceEmbedder>,
    serial: Mutex<()>,
}

impl Featurizer {
    pub fn new(annotator: Annotator, embedder: Box<dyn SentenceEmbedder>) -> Self {
        Featurizer {
            annotator,
            embedder,
            serial: Mutex::new(()),
        }
    }

    /// Stub tagger, built-in lexicon linker, and hash embedder.
    pub fn stub(config: FeatureConfig) -> Self {
        let dim = config.cui_dim;
        Self::new(
            Annotator::with_stubs(config),
            Box::new(HashEmbedder::new(dim)),
        )
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.annotator.config
    }

    pub fn concurrent_safe(&self) -> bool {
        self.annotator.concurrent_safe() && self.embedder.concurrent_safe()
    }

    pub fn featurize<T: Real>(
        &self,
        id: Option<&str>,
        text: &str,
    ) -> Result<StaticFeatures<T>, FeatureError> {
        let _guard = (!self.concurrent_safe())
            .then(|| self.serial.lock().unwrap_or_else(|e| e.into_inner()));
        let sentence = self.annotator.annotate(id, text)?;
        static_features(self.config(), self.embedder.as_ref(), &sentence)
    }

    /// Parallel over sentences; adapters that are not concurrency safe are
    /// called one sentence at a time.
    pub fn featurize_batch<T: Real>(
        &self,
        items: &[(&str, &str)],
    ) -> Result<Vec<StaticFeatures<T>>, FeatureError> {
        items
            .par_iter()
            .map(|(id, text)| self.featurize(Some(id), text))
            .collect()
    }
}
