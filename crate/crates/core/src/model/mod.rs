//! The convolutional classifier over enriched wordpiece features.

mod bundle;
mod net;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::features::{
    BlockLayout, FeatureConfig, FeatureError, FeatureMatrix, Featurizer, Matrix, StaticFeatures,
};
use crate::label::{LabelSet, SdohLabel};
use crate::scalar::{Real, Scalar};

pub use bundle::{
    export_model, import_model, BundleManifest, TensorInfo, BUNDLE_VERSION, WEIGHTS_MAGIC,
};
pub use net::{
    bce_with_logits, bucket_of, sigmoid, Dims, Grads, Net, Params, Tensor, TENSOR_NAMES,
};
pub use train::{
    build_examples, fit, predict_probabilities, train, tune_thresholds, CheckpointSelector,
    EpochRecord, Example, THRESHOLD_GRID,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("record `{0}` is not in the corpus")]
    UnknownId(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("bundle format version {found} is not supported (expected {expected})")]
    Incompatible { found: u32, expected: u32 },
    #[error("bundle layout does not match its config: {0}")]
    LayoutMismatch(String),
    #[error("corrupt bundle: {0}")]
    Corrupt(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Multilabel,
    Binary,
}

impl Variant {
    pub fn outputs(self) -> usize {
        match self {
            Variant::Multilabel => SdohLabel::COUNT,
            Variant::Binary => 1,
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Variant::Multilabel => 1e-5,
            Variant::Binary => 6.5e-6,
        }
    }

    /// Training targets for a gold label set.
    pub fn target<T: Real>(self, gold: LabelSet) -> Vec<T> {
        let bit = |b: bool| if b { T::one() } else { T::zero() };
        match self {
            Variant::Multilabel => SdohLabel::ALL
                .iter()
                .map(|l| bit(gold.contains(*l)))
                .collect(),
            Variant::Binary => vec![bit(!gold.is_empty())],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Multilabel => "multilabel",
            Variant::Binary => "binary",
        })
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multilabel" => Ok(Variant::Multilabel),
            "binary" => Ok(Variant::Binary),
            _ => Err(ModelError::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
}

/// Trainable hash-bucket wordpiece embedding used as the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct EncoderConfig {
    pub id: String,
    pub buckets: usize,
    pub dim: usize,
    pub max_piece_chars: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            id: "hash-wordpiece".into(),
            buckets: 4096,
            dim: 32,
            max_piece_chars: crate::features::DEFAULT_MAX_PIECE_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ModelConfig {
    pub variant: Variant,
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub conv_channels: [usize; 2],
    pub kernel_size: usize,
    pub pooling: Pooling,
    /// One per output, each in (0, 1).
    pub thresholds: Vec<f64>,
    /// Longer sentences are truncated to this many wordpieces.
    pub max_wordpieces: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, features: FeatureConfig) -> Self {
        ModelConfig {
            variant,
            features,
            encoder: EncoderConfig::default(),
            conv_channels: [32, 32],
            kernel_size: 3,
            pooling: Pooling::Max,
            thresholds: vec![0.5; variant.outputs()],
            max_wordpieces: 128,
        }
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout::new(self.encoder.dim, &self.features)
    }

    pub fn dims(&self) -> Dims {
        let layout = self.layout();
        Dims {
            buckets: self.encoder.buckets,
            d_enc: self.encoder.dim,
            d_static: layout.static_width(),
            c1: self.conv_channels[0],
            c2: self.conv_channels[1],
            kernel: self.kernel_size,
            outputs: self.variant.outputs(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.features.validate()?;
        let bad = |m: String| Err(ModelError::Config(m));
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad(format!(
                "kernel_size must be a positive odd integer, got {}",
                self.kernel_size
            ));
        }
        if self.conv_channels.contains(&0) {
            return bad("conv_channels must be positive".into());
        }
        if self.encoder.buckets == 0 || self.encoder.dim == 0 {
            return bad("encoder buckets and dim must be positive".into());
        }
        if self.max_wordpieces == 0 {
            return bad("max_wordpieces must be positive".into());
        }
        if self.thresholds.len() != self.variant.outputs() {
            return bad(format!(
                "{} variant needs {} thresholds, got {}",
                self.variant,
                self.variant.outputs(),
                self.thresholds.len()
            ));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return bad(format!("threshold {t} is outside (0, 1)"));
        }
        Ok(())
    }

    /// Featurizer with stub annotators and the configured piece length.
    pub fn stub_featurizer(&self) -> Featurizer {
        let mut f = Featurizer::stub(self.features.clone());
        f.annotator.max_piece_chars = self.encoder.max_piece_chars;
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointRule {
    LowestValidationLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub checkpoint_rule: CheckpointRule,
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: variant.default_learning_rate(),
            batch_size: 16,
            seed: 0,
            optimizer: Optimizer::Adam,
            checkpoint_rule: CheckpointRule::LowestValidationLoss,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `label_i` is included iff `p_i >= threshold_i`.
pub fn decide(probabilities: &[f64], thresholds: &[f64]) -> Result<LabelSet, ModelError> {
    if probabilities.len() != SdohLabel::COUNT || thresholds.len() != SdohLabel::COUNT {
        return Err(ModelError::Shape(format!(
            "decide needs {} probabilities and thresholds, got {} and {}",
            SdohLabel::COUNT,
            probabilities.len(),
            thresholds.len()
        )));
    }
    Ok(SdohLabel::ALL
        .iter()
        .zip(probabilities.iter().zip(thresholds))
        .filter(|(_, (p, t))| p >= t)
        .map(|(l, _)| *l)
        .collect())
}

pub fn decide_binary(probability: f64, threshold: f64) -> bool {
    probability >= threshold
}

/// A model's decision for one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Decision {
    Labels(LabelSet),
    Presence(bool),
}

impl Decision {
    /// Multilabel decisions as a set; binary decisions have no labels.
    pub fn labels(self) -> LabelSet {
        match self {
            Decision::Labels(l) => l,
            Decision::Presence(_) => LabelSet::EMPTY,
        }
    }

    pub fn has_sdoh(self) -> bool {
        match self {
            Decision::Labels(l) => !l.is_empty(),
            Decision::Presence(p) => p,
        }
    }
}

/// Parameters at the selected epoch plus the full training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<T> {
    pub config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Params<T>,
    pub curve: Vec<EpochRecord>,
    /// 1-based epoch whose parameters are kept.
    pub selected_epoch: usize,
}

impl<T: Real> TrainedModel<T> {
    pub fn net(&self) -> Net<T> {
        Net::new(self.config.dims(), self.params.clone())
    }

    /// Output probabilities for an assembled feature matrix.
    pub fn forward(&self, fm: &FeatureMatrix<T>) -> Result<Vec<f64>, ModelError> {
        let layout = self.config.layout();
        if fm.block_layout != layout {
            return Err(ModelError::Shape(format!(
                "feature layout {:?} does not match model layout {layout:?}",
                fm.block_layout
            )));
        }
        let net = Net::new(self.config.dims(), self.params.clone());
        let trace = net.forward_input(fm.concat().data, fm.n_wordpieces);
        Ok(trace
            .logits
            .into_iter()
            .map(|z| Scalar::to_f64(sigmoid(z)))
            .collect())
    }

    /// Assembles the full feature matrix with this model's encoder.
    pub fn assemble(&self, s: StaticFeatures<T>) -> Result<FeatureMatrix<T>, ModelError> {
        let s = truncate(s, self.config.max_wordpieces);
        let net = Net::new(self.config.dims(), self.params.clone());
        let enc = net.encode(&net.bucket_ids(&s.wordpieces));
        let mut fm = FeatureMatrix::from_static(s, enc)?;
        fm.block_layout = self.config.layout();
        Ok(fm)
    }

    pub fn decide(&self, probabilities: &[f64]) -> Result<Decision, ModelError> {
        match self.config.variant {
            Variant::Multilabel => {
                decide(probabilities, &self.config.thresholds).map(Decision::Labels)
            }
            Variant::Binary => match probabilities {
                [p] => Ok(Decision::Presence(decide_binary(
                    *p,
                    self.config.thresholds[0],
                ))),
                _ => Err(ModelError::Shape(format!(
                    "binary decide needs 1 probability, got {}",
                    probabilities.len()
                ))),
            },
        }
    }

    /// Featurizes, runs, and thresholds one sentence.
    pub fn predict_text(
        &self,
        featurizer: &Featurizer,
        id: Option<&str>,
        text: &str,
    ) -> Result<(Vec<f64>, Decision), ModelError> {
        let fm = self.assemble(featurizer.featurize(id, text)?)?;
        let p = self.forward(&fm)?;
        let d = self.decide(&p)?;
        Ok((p, d))
    }
}

pub(crate) fn truncate<T: Real>(mut s: StaticFeatures<T>, max: usize) -> StaticFeatures<T> {
    if s.wordpieces.len() <= max {
        return s;
    }
    s.wordpieces.truncate(max);
    let cut = |m: &mut Matrix<T>| {
        m.data.truncate(max * m.cols);
        m.rows = max;
    };
    cut(&mut s.cui_block);
    cut(&mut s.onehot_block);
    s
}
