use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{bce_with_logits, bucket_of, sigmoid, Grads, Net, Params};
use super::{
    decide, truncate, ModelConfig, ModelError, Optimizer, TrainConfig, TrainedModel, Variant,
};
use crate::dataset::{Corpus, SentenceRecord};
use crate::features::{Featurizer, Matrix};
use crate::label::LabelSet;
use crate::metrics::{evaluate, evaluate_binary};
use crate::scalar::{Real, Scalar};
use crate::stratify::{derive_seed, SplitSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
}

/// A featurized record ready for training or scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub id: String,
    pub bucket_ids: Vec<usize>,
    /// Concept and one-hot blocks side by side.
    pub static_block: Matrix<T>,
    pub target: Vec<T>,
    pub gold: LabelSet,
}

pub fn build_examples<T: Real>(
    cfg: &ModelConfig,
    featurizer: &Featurizer,
    records: &[&SentenceRecord],
) -> Result<Vec<Example<T>>, ModelError> {
    let items: Vec<(&str, &str)> = records
        .iter()
        .map(|r| (r.id.as_str(), r.text.as_str()))
        .collect();
    let feats = featurizer.featurize_batch::<T>(&items)?;
    Ok(records
        .iter()
        .zip(feats)
        .map(|(r, s)| {
            let s = truncate(s, cfg.max_wordpieces);
            Example {
                id: r.id.clone(),
                bucket_ids: s
                    .wordpieces
                    .iter()
                    .map(|p| bucket_of(p, cfg.encoder.buckets))
                    .collect(),
                static_block: Matrix::hcat(&[&s.cui_block, &s.onehot_block]),
                target: cfg.variant.target(r.gold),
                gold: r.gold,
            }
        })
        .collect())
}

struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

fn apply_update<T: Real>(
    params: &mut Params<T>,
    grads: &Grads<T>,
    net_dims: &super::Dims,
    tcfg: &TrainConfig,
    adam: &mut AdamState<T>,
) {
    let lr = T::from_f64_lossy(tcfg.learning_rate);
    let emb = grads.dense_embedding(net_dims);
    let all: Vec<&[T]> = std::iter::once(emb.as_slice())
        .chain(grads.dense.iter().map(Vec::as_slice))
        .collect();
    match tcfg.optimizer {
        Optimizer::Sgd => {
            for (t, g) in params.tensors.iter_mut().zip(all) {
                for (p, g) in t.data.iter_mut().zip(g) {
                    *p = *p - lr * *g;
                }
            }
        }
        Optimizer::Adam => {
            let (b1, b2, eps) = (
                T::from_f64_lossy(0.9),
                T::from_f64_lossy(0.999),
                T::from_f64_lossy(1e-8),
            );
            adam.step += 1;
            let c1 = T::one() - b1.powi(adam.step);
            let c2 = T::one() - b2.powi(adam.step);
            for (i, (t, g)) in params.tensors.iter_mut().zip(all).enumerate() {
                for (j, (p, g)) in t.data.iter_mut().zip(g).enumerate() {
                    let m = &mut adam.m[i][j];
                    let v = &mut adam.v[i][j];
                    *m = b1 * *m + (T::one() - b1) * *g;
                    *v = b2 * *v + (T::one() - b2) * *g * *g;
                    *p = *p - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Mean loss and per-example probabilities.
fn score<T: Real>(net: &Net<T>, examples: &[Example<T>]) -> (f64, Vec<Vec<f64>>) {
    let out: Vec<(f64, Vec<f64>)> = examples
        .par_iter()
        .map(|ex| {
            let trace = net.forward(&ex.bucket_ids, &ex.static_block);
            let loss = Scalar::to_f64(bce_with_logits(&trace.logits, &ex.target));
            (
                loss,
                trace
                    .logits
                    .iter()
                    .map(|z| Scalar::to_f64(sigmoid(*z)))
                    .collect(),
            )
        })
        .collect();
    let loss = out.iter().map(|(l, _)| *l).sum::<f64>() / examples.len().max(1) as f64;
    (loss, out.into_iter().map(|(_, p)| p).collect())
}

fn macro_f1(cfg: &ModelConfig, golds: &[LabelSet], probs: &[Vec<f64>]) -> f64 {
    match cfg.variant {
        Variant::Multilabel => {
            let preds: Vec<LabelSet> = probs
                .iter()
                .map(|p| decide(p, &cfg.thresholds).unwrap_or(LabelSet::EMPTY))
                .collect();
            evaluate::<f64>(golds, &preds).map_or(0.0, |r| r.macro_.scores.f1)
        }
        Variant::Binary => {
            let gold: Vec<bool> = golds.iter().map(|g| !g.is_empty()).collect();
            let pred: Vec<bool> = probs.iter().map(|p| p[0] >= cfg.thresholds[0]).collect();
            evaluate_binary::<f64>(&gold, &pred).map_or(0.0, |r| r.macro_.scores.f1)
        }
    }
}

/// Tracks the lowest-validation-loss epoch; the earliest wins ties.
#[derive(Debug, Clone)]
pub struct CheckpointSelector<P> {
    best: Option<(f64, usize, P)>,
}

impl<P> Default for CheckpointSelector<P> {
    fn default() -> Self {
        CheckpointSelector { best: None }
    }
}

impl<P> CheckpointSelector<P> {
    /// Records an epoch; `snapshot` runs only when it becomes the best.
    pub fn offer(&mut self, epoch: usize, val_loss: f64, snapshot: impl FnOnce() -> P) {
        if self.best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            self.best = Some((val_loss, epoch, snapshot()));
        }
    }

    pub fn selected_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.1)
    }

    pub fn into_selected(self) -> Option<(usize, P)> {
        self.best.map(|(_, e, p)| (e, p))
    }
}

/// Mini-batch training with per-epoch validation. Keeps the parameters of the
/// epoch with the lowest validation loss, the earliest on ties.
pub fn fit<T: Real>(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &[Example<T>],
    val: &[Example<T>],
) -> Result<TrainedModel<T>, ModelError> {
    mcfg.validate()?;
    tcfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(ModelError::EmptySplit("validation"));
    }
    let dims = mcfg.dims();
    for ex in train.iter().chain(val) {
        if ex.static_block.cols != dims.d_static || ex.static_block.rows != ex.bucket_ids.len() {
            return Err(ModelError::Shape(format!(
                "example `{}` has a {}x{} static block, expected {}x{}",
                ex.id,
                ex.static_block.rows,
                ex.static_block.cols,
                ex.bucket_ids.len(),
                dims.d_static
            )));
        }
    }
    let mut net = Net::new(dims, Params::init(&dims, derive_seed(tcfg.seed, 0)));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, 1));
    let mut adam = AdamState {
        m: net
            .params
            .tensors
            .iter()
            .map(|t| vec![T::zero(); t.data.len()])
            .collect(),
        v: net
            .params
            .tensors
            .iter()
            .map(|t| vec![T::zero(); t.data.len()])
            .collect(),
        step: 0,
    };
    let val_golds: Vec<LabelSet> = val.iter().map(|e| e.gold).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(tcfg.epochs);
    let mut best = CheckpointSelector::default();

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let scale = T::one() / T::from_count(batch.len() as u64);
            let parts: Vec<(T, Grads<T>)> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &train[i];
                    net.loss_and_grads(&ex.bucket_ids, &ex.static_block, &ex.target, scale)
                })
                .collect();
            let mut grads = Grads::zeros(&dims);
            let mut batch_loss = 0.0;
            for (l, g) in &parts {
                batch_loss += Scalar::to_f64(*l);
                grads.add(g);
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::Divergence {
                    epoch,
                    batch: batch_no + 1,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            apply_update(&mut net.params, &grads, &dims, tcfg, &mut adam);
        }
        let (val_loss, probs) = score(&net, val);
        if !val_loss.is_finite() {
            return Err(ModelError::Divergence {
                epoch,
                batch: 0,
                loss: val_loss,
            });
        }
        curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_macro_f1: macro_f1(mcfg, &val_golds, &probs),
        });
        best.offer(epoch, val_loss, || net.params.clone());
    }
    let (selected_epoch, params) = best.into_selected().expect("at least one epoch");
    Ok(TrainedModel {
        config: mcfg.clone(),
        train_config: tcfg.clone(),
        params,
        curve,
        selected_epoch,
    })
}

fn records<'a>(corpus: &'a Corpus, ids: &[String]) -> Result<Vec<&'a SentenceRecord>, ModelError> {
    let index = corpus.index();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| &corpus.records()[i])
                .ok_or_else(|| ModelError::UnknownId(id.clone()))
        })
        .collect()
}

/// Featurizes the split's training and validation records and fits a model.
pub fn train<T: Real>(
    corpus: &Corpus,
    split: &SplitSpec,
    featurizer: &Featurizer,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainedModel<T>, ModelError> {
    mcfg.validate()?;
    let tr = build_examples(mcfg, featurizer, &records(corpus, &split.train)?)?;
    let va = build_examples(mcfg, featurizer, &records(corpus, &split.validation)?)?;
    fit(mcfg, tcfg, &tr, &va)
}

pub fn predict_probabilities<T: Real>(
    model: &TrainedModel<T>,
    examples: &[Example<T>],
) -> Vec<Vec<f64>> {
    score(&model.net(), examples).1
}

pub const THRESHOLD_GRID: [f64; 19] = [
    0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85,
    0.9, 0.95,
];

/// Per-output threshold maximizing that output's F1 on held-out data. Ties go
/// to the value closest to 0.5; outputs without positives keep 0.5.
pub fn tune_thresholds(probs: &[Vec<f64>], targets: &[Vec<bool>]) -> Vec<f64> {
    let outputs = targets.first().map_or(0, Vec::len);
    (0..outputs)
        .map(|j| {
            if !targets.iter().any(|t| t[j]) {
                return 0.5;
            }
            let f1 = |th: f64| {
                let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
                for (p, t) in probs.iter().zip(targets) {
                    match (p[j] >= th, t[j]) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
                if tp == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
                }
            };
            let mut best = (f64::NEG_INFINITY, 0.5f64);
            for th in THRESHOLD_GRID {
                let f = f1(th);
                let closer = (th - 0.5).abs() < (best.1 - 0.5).abs();
                if f > best.0 || (f == best.0 && closer) {
                    best = (f, th);
                }
            }
            best.1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureConfig, FeatureKind};
    use proptest::prelude::*;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(
            Variant::Multilabel,
            FeatureConfig::with_features(&[FeatureKind::TokSdoh]),
        );
        cfg.encoder.buckets = 257;
        cfg.encoder.dim = 8;
        cfg.conv_channels = [8, 8];
        cfg
    }

    fn example(n: usize, seed: u64) -> Example<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gold = LabelSet::from_bits(rng.gen_range(0..64)).unwrap();
        Example {
            id: format!("e{seed}"),
            bucket_ids: (0..n).map(|_| rng.gen_range(0..257)).collect(),
            static_block: Matrix::from_vec(
                n,
                6,
                (0..n * 6)
                    .map(|_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 })
                    .collect(),
            ),
            target: Variant::Multilabel.target(gold),
            gold,
        }
    }

    #[test]
    fn one_epoch_selects_epoch_one() {
        let cfg = tiny_config();
        let mut t = TrainConfig::for_variant(Variant::Multilabel);
        t.epochs = 1;
        let data: Vec<_> = (0..6).map(|i| example(3, i)).collect();
        let m = fit(&cfg, &t, &data[..4], &data[4..]).unwrap();
        assert_eq!(m.selected_epoch, 1);
        assert_eq!(m.curve.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let mut t = TrainConfig::for_variant(Variant::Multilabel);
        t.epochs = 3;
        t.learning_rate = 1e-2;
        t.batch_size = 3;
        let data: Vec<_> = (0..10).map(|i| example(1 + i as usize % 5, i)).collect();
        let a = fit(&cfg, &t, &data[..7], &data[7..]).unwrap();
        let b = fit(&cfg, &t, &data[..7], &data[7..]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selected_epoch_is_first_argmin() {
        let cfg = tiny_config();
        let mut t = TrainConfig::for_variant(Variant::Multilabel);
        t.epochs = 8;
        t.learning_rate = 0.2;
        let data: Vec<_> = (0..12).map(|i| example(4, i)).collect();
        let m = fit(&cfg, &t, &data[..8], &data[8..]).unwrap();
        let min = m
            .curve
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        let first = m.curve.iter().find(|r| r.val_loss == min).unwrap().epoch;
        assert_eq!(m.selected_epoch, first);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = tiny_config();
        let mut t = TrainConfig::for_variant(Variant::Multilabel);
        t.optimizer = Optimizer::Sgd;
        t.learning_rate = 1e300;
        t.epochs = 5;
        let data: Vec<_> = (0..6).map(|i| example(4, i)).collect();
        assert!(matches!(
            fit(&cfg, &t, &data[..4], &data[4..]),
            Err(ModelError::Divergence { .. })
        ));
    }

    #[test]
    fn empty_splits_are_rejected() {
        let cfg = tiny_config();
        let t = TrainConfig::for_variant(Variant::Multilabel);
        let data = vec![example(2, 1)];
        assert!(matches!(
            fit(&cfg, &t, &data, &[]),
            Err(ModelError::EmptySplit("validation"))
        ));
    }

    #[test]
    fn tuned_thresholds_separate_clean_scores() {
        let probs = vec![
            vec![0.9, 0.2],
            vec![0.8, 0.3],
            vec![0.3, 0.1],
            vec![0.2, 0.05],
        ];
        let targets = vec![
            vec![true, false],
            vec![true, false],
            vec![false, false],
            vec![false, false],
        ];
        let t = tune_thresholds(&probs, &targets);
        assert_eq!(t[1], 0.5);
        assert!(t[0] > 0.3 && t[0] <= 0.8);
        assert_eq!(t[0], 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn tuning_never_loses_to_default(
            rows in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)
        ) {
            let probs: Vec<Vec<f64>> = rows.iter().map(|(p, _)| vec![*p]).collect();
            let targets: Vec<Vec<bool>> = rows.iter().map(|(_, t)| vec![*t]).collect();
            let th = tune_thresholds(&probs, &targets)[0];
            let f1 = |th: f64| {
                let tp = rows.iter().filter(|(p, t)| *p >= th && *t).count() as f64;
                let fp = rows.iter().filter(|(p, t)| *p >= th && !*t).count() as f64;
                let fn_ = rows.iter().filter(|(p, t)| *p < th && *t).count() as f64;
                if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) }
            };
            prop_assert!(f1(th) >= f1(0.5) - 1e-12);
        }
    }
}
