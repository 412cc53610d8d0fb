use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, FeatureSet};
use crate::diffmath::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Row `i` of A and row `i` of B form a pair.
    Paired,
    /// Pairs are drawn by label: each (A-sample, label) gets a random B-sample
    /// carrying that label.
    Unpaired,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Paired => "paired",
            Regime::Unpaired => "unpaired",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paired" | "paired-single" => Ok(Regime::Paired),
            "unpaired" | "unpaired-multi" => Ok(Regime::Unpaired),
            other => Err(format!(
                "unknown regime {other:?} (expected paired or unpaired)"
            )),
        }
    }
}

/// Indices into A and B plus the label they share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub label: usize,
}

/// Row-aligned training batch; row `i` of `za` and `zb` share `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub za: Matrix,
    pub zb: Matrix,
    pub labels: Vec<usize>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Builds the pair list for one epoch, in A's sample order.
///
/// In the unpaired regime a multi-label A-sample expands into one pair per
/// label; the B partner is redrawn on every call (vary `seed` per epoch).
pub fn make_pairs(
    fa: &FeatureSet,
    fb: &FeatureSet,
    regime: Regime,
    seed: u64,
) -> Result<Vec<Pair>, DataError> {
    if fa.classes() != fb.classes() {
        return Err(DataError::PairMismatch(format!(
            "label universes differ: {} vs {} classes",
            fa.classes(),
            fb.classes()
        )));
    }
    match regime {
        Regime::Paired => {
            if fa.len() != fb.len() {
                return Err(DataError::PairMismatch(format!(
                    "{} A-samples vs {} B-samples",
                    fa.len(),
                    fb.len()
                )));
            }
            (0..fa.len())
                .map(|i| {
                    let (la, lb) = (fa.labels.set(i), fb.labels.set(i));
                    if la != lb {
                        return Err(DataError::PairMismatch(format!(
                            "row {i}: labels {la:?} vs {lb:?}"
                        )));
                    }
                    Ok(Pair {
                        a: i,
                        b: i,
                        label: la[0],
                    })
                })
                .collect()
        }
        Regime::Unpaired => {
            let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); fb.classes()];
            for j in 0..fb.len() {
                for &l in fb.labels.set(j) {
                    by_label[l].push(j);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pairs = Vec::new();
            for i in 0..fa.len() {
                for &l in fa.labels.set(i) {
                    let pool = &by_label[l];
                    if pool.is_empty() {
                        return Err(DataError::UnmatchedLabel { label: l });
                    }
                    let b = pool[rng.random_range(0..pool.len())];
                    pairs.push(Pair { a: i, b, label: l });
                }
            }
            Ok(pairs)
        }
    }
}

/// Shuffles `pairs` and gathers them into batches of at most `batch_size` rows.
pub fn batches<R: Rng + ?Sized>(
    pairs: &[Pair],
    za: &Matrix,
    zb: &Matrix,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<PairedBatch>, DataError> {
    if pairs.is_empty() {
        return Err(DataError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut order: Vec<Pair> = pairs.to_vec();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let ia: Vec<usize> = chunk.iter().map(|p| p.a).collect();
            let ib: Vec<usize> = chunk.iter().map(|p| p.b).collect();
            Ok(PairedBatch {
                za: za.select_rows(&ia)?,
                zb: zb.select_rows(&ib)?,
                labels: chunk.iter().map(|p| p.label).collect(),
            })
        })
        .collect()
}
