//! Multilabel iterative stratification for train/validation/test splits and
//! repeated k-fold plans.
//!
//! Records with an empty gold set are placed in a virtual "no label" stratum so
//! the SDoH-positive/negative balance carries over to every subset.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Corpus;
use crate::label::{LabelSet, SdohLabel};

/// Default train/validation/test proportions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

const STRATA: usize = SdohLabel::COUNT + 1;
const NO_LABEL_STRATUM: usize = SdohLabel::COUNT;
const TIE_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("fractions must be positive and sum to 1, got {0:?}")]
    InvalidFractions(Vec<f64>),
    #[error("corpus of {records} records is too small for fraction {fraction} (needs at least one record per subset)")]
    TooSmall { records: usize, fraction: f64 },
    #[error(
        "fold count k={k} is invalid for a corpus of {records} records (need 2 <= k <= records)"
    )]
    InvalidFoldCount { k: usize, records: usize },
    #[error("repeat count must be at least 1")]
    NoRepeats,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SplitError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SplitError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub k: usize,
    pub repeats: usize,
    /// `folds[repeat][fold]` is the held-out id list.
    pub folds: Vec<Vec<Vec<String>>>,
}

/// One (repeat, fold) cell of a plan.
#[derive(Debug, Clone)]
pub struct Fold {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

impl FoldPlan {
    pub fn evaluations(&self) -> usize {
        self.k * self.repeats
    }

    /// Training ids are every id outside the held-out fold, in fold order.
    pub fn fold(&self, repeat: usize, fold: usize) -> Fold {
        let folds = &self.folds[repeat];
        let train = folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect();
        Fold {
            repeat,
            fold,
            train,
            held_out: folds[fold].clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Fold> + '_ {
        (0..self.repeats).flat_map(move |r| (0..self.k).map(move |f| self.fold(r, f)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold plan serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SplitError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SplitError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn strata(gold: LabelSet) -> impl Iterator<Item = usize> {
    let no_label = gold.is_empty().then_some(NO_LABEL_STRATUM);
    gold.iter().map(SdohLabel::index).chain(no_label)
}

/// Assigns every record to one of `ratios.len()` subsets. Returns the subset
/// index per record.
///
/// Rarest stratum first: each of its unassigned records goes to the subset
/// with the largest remaining demand for that stratum, then the largest
/// remaining overall demand, then a seeded random pick.
#[allow(clippy::needless_range_loop)]
pub fn iterative_stratification<R: Rng>(
    golds: &[LabelSet],
    ratios: &[f64],
    rng: &mut R,
) -> Vec<usize> {
    let n = golds.len();
    let subsets = ratios.len();
    let mut stratum_members: Vec<Vec<usize>> = vec![Vec::new(); STRATA];
    for (i, g) in golds.iter().enumerate() {
        for s in strata(*g) {
            stratum_members[s].push(i);
        }
    }

    let mut desired: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut desired_by_stratum: Vec<Vec<f64>> = stratum_members
        .iter()
        .map(|m| ratios.iter().map(|r| r * m.len() as f64).collect())
        .collect();
    let mut remaining: Vec<usize> = stratum_members.iter().map(Vec::len).collect();
    let mut assignment = vec![usize::MAX; n];
    let mut candidates = Vec::with_capacity(subsets);

    while let Some(stratum) = (0..STRATA)
        .filter(|&s| remaining[s] > 0)
        .min_by_key(|&s| remaining[s])
    {
        for idx in 0..stratum_members[stratum].len() {
            let record = stratum_members[stratum][idx];
            if assignment[record] != usize::MAX {
                continue;
            }
            let demand = &desired_by_stratum[stratum];
            let best = demand.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            candidates.clear();
            candidates.extend((0..subsets).filter(|&j| demand[j] >= best - TIE_EPS));
            if candidates.len() > 1 {
                let best_overall = candidates
                    .iter()
                    .map(|&j| desired[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                candidates.retain(|&j| desired[j] >= best_overall - TIE_EPS);
            }
            let chosen = if candidates.len() == 1 {
                candidates[0]
            } else {
                candidates[rng.gen_range(0..candidates.len())]
            };
            assignment[record] = chosen;
            desired[chosen] -= 1.0;
            for s in strata(golds[record]) {
                desired_by_stratum[s][chosen] -= 1.0;
                remaining[s] -= 1;
            }
        }
    }
    assignment
}

fn check_fractions(fractions: &[f64], n: usize) -> Result<(), SplitError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::InvalidFractions(fractions.to_vec()));
    }
    if let Some(&fraction) = fractions.iter().find(|f| **f * (n as f64) < 1.0) {
        return Err(SplitError::TooSmall {
            records: n,
            fraction,
        });
    }
    Ok(())
}

fn partition(ids: &[String], assignment: &[usize], subsets: usize) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new(); subsets];
    for (id, &j) in ids.iter().zip(assignment) {
        out[j].push(id.clone());
    }
    out
}

/// Three-way split, applied as (train+validation | test) followed by
/// (train | validation). Id lists keep corpus order.
pub fn stratified_split(
    c: &Corpus,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitSpec, SplitError> {
    check_fractions(&fractions, c.len())?;
    let [train_f, val_f, test_f] = fractions;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ids = c.ids();
    let golds = c.golds();
    let outer = iterative_stratification(&golds, &[1.0 - test_f, test_f], &mut rng);
    let (mut rest_ids, mut rest_golds) = (Vec::new(), Vec::new());
    let mut test = Vec::new();
    for ((id, gold), &j) in ids.iter().zip(&golds).zip(&outer) {
        if j == 0 {
            rest_ids.push(id.clone());
            rest_golds.push(*gold);
        } else {
            test.push(id.clone());
        }
    }

    let inner_train = train_f / (train_f + val_f);
    let inner = iterative_stratification(&rest_golds, &[inner_train, 1.0 - inner_train], &mut rng);
    let mut parts = partition(&rest_ids, &inner, 2).into_iter();
    let train = parts.next().unwrap_or_default();
    let validation = parts.next().unwrap_or_default();
    if train.is_empty() || validation.is_empty() || test.is_empty() {
        let fraction = [train_f, val_f, test_f][[train.len(), validation.len(), test.len()]
            .iter()
            .position(|n| *n == 0)
            .unwrap()];
        return Err(SplitError::TooSmall {
            records: c.len(),
            fraction,
        });
    }
    Ok(SplitSpec {
        seed,
        fractions,
        train,
        validation,
        test,
    })
}

/// Two-way stratified split of an id subset. Returns (first, second).
pub fn stratified_two_way(
    c: &Corpus,
    ids: &[String],
    first_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>), SplitError> {
    let fractions = [first_fraction, 1.0 - first_fraction];
    check_fractions(&fractions, ids.len())?;
    let records = c.select(ids);
    let golds: Vec<LabelSet> = records.iter().map(|r| r.gold).collect();
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = iterative_stratification(&golds, &fractions, &mut rng);
    let mut parts = partition(&ids, &assignment, 2).into_iter();
    Ok((parts.next().unwrap(), parts.next().unwrap()))
}

/// Seed for one repeat of a fold plan (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn make_fold_plan(
    c: &Corpus,
    k: usize,
    repeats: usize,
    seed: u64,
) -> Result<FoldPlan, SplitError> {
    if k < 2 || k > c.len() {
        return Err(SplitError::InvalidFoldCount {
            k,
            records: c.len(),
        });
    }
    if repeats == 0 {
        return Err(SplitError::NoRepeats);
    }
    let ids = c.ids();
    let golds = c.golds();
    let ratios = vec![1.0 / k as f64; k];
    let folds = (0..repeats)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
            let assignment = iterative_stratification(&golds, &ratios, &mut rng);
            partition(&ids, &assignment, k)
        })
        .collect();
    Ok(FoldPlan {
        seed,
        k,
        repeats,
        folds,
    })
}
