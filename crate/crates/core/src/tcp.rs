//! Temporal coherence prediction: grouped position labels, partial
//! shuffling, and per-position group classification.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Var};
use crate::encoders::partition;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcpConfig {
    pub groups: usize,
    pub shuffle_fraction: f64,
    pub video_branch: bool,
    pub moment_branch: bool,
}

impl Default for TcpConfig {
    fn default() -> Self {
        TcpConfig {
            groups: 8,
            shuffle_fraction: 0.25,
            video_branch: true,
            moment_branch: true,
        }
    }
}

impl TcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Config("tcp.groups must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.shuffle_fraction) {
            return Err(Error::Config(format!(
                "tcp.shuffle_fraction {} outside [0, 1]",
                self.shuffle_fraction
            )));
        }
        Ok(())
    }
}

/// 1-based group label of every position: `g` consecutive near-equal
/// segments, larger ones first.
pub fn group_labels(len: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || groups > len {
        return Err(Error::InvalidInput(format!(
            "cannot split {len} positions into {groups} groups"
        )));
    }
    let mut labels = vec![0; len];
    for (g, range) in partition(len, groups).into_iter().enumerate() {
        labels[range].fill(g + 1);
    }
    Ok(labels)
}

/// A partial shuffle: position `t` of the shuffled sequence holds original
/// row `order[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Shuffle {
    pub order: Vec<usize>,
    pub labels: Vec<usize>,
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
}

/// Picks `round(fraction · T)` positions uniformly without replacement and
/// permutes them uniformly among themselves.
pub fn shuffle_subset<R: Rng + ?Sized>(labels: &[usize], fraction: f64, rng: &mut R) -> Shuffle {
    let len = labels.len();
    let k = ((fraction * len as f64).round() as usize).min(len);
    let mut positions = index::sample(rng, len, k).into_vec();
    positions.sort_unstable();
    let mut moved = positions.clone();
    moved.shuffle(rng);
    let mut order: Vec<usize> = (0..len).collect();
    for (&dst, &src) in positions.iter().zip(&moved) {
        order[dst] = src;
    }
    Shuffle {
        labels: order.iter().map(|&i| labels[i]).collect(),
        order,
        positions,
    }
}

/// Applies a shuffle to the rows of `features`.
pub fn apply_shuffle<F: Clone>(features: &Array2<F>, shuffle: &Shuffle) -> Array2<F> {
    features.select(ndarray::Axis(0), &shuffle.order)
}

/// Linear group classifiers, one per branch.
#[derive(Debug, Clone)]
pub struct TcpHeads {
    pub video: Linear,
    pub moment: Linear,
}

impl TcpHeads {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, dim: usize, groups: usize) -> Self {
        TcpHeads {
            video: Linear::new(init, "tcp.video", dim, groups, true),
            moment: Linear::new(init, "tcp.moment", dim, groups, true),
        }
    }
}

/// Mean cross-entropy of `logits` (`T × g`) against 1-based `labels`.
pub fn cross_entropy<'g, F: Scalar>(logits: Var<'g, F>, labels: &[usize]) -> Var<'g, F> {
    let idx: Vec<(usize, usize)> = labels.iter().enumerate().map(|(t, &y)| (t, y - 1)).collect();
    logits.log_softmax_rows().gather(&idx).mean().scale(-F::one())
}

/// `CE(p_o, y_o) + CE(p_s, y_s)` for one sequence, given the encoder
/// outputs of the original and the re-encoded shuffled input.
pub fn tcp_loss<'g, F: Scalar>(
    ctx: &Ctx<'g, F>,
    classifier: &Linear,
    original: Var<'g, F>,
    shuffled: Var<'g, F>,
    labels: &[usize],
    shuffled_labels: &[usize],
) -> Var<'g, F> {
    cross_entropy(classifier.forward(ctx, original), labels)
        + cross_entropy(classifier.forward(ctx, shuffled), shuffled_labels)
}

/// Fraction of positions whose arg-max logit is the right group.
pub fn group_accuracy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> f64 {
    let hits = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| crate::losses::argmax_first(row.iter().copied()).map(|(k, _)| k + 1) == Some(y))
        .count();
    hits as f64 / labels.len().max(1) as f64
}
