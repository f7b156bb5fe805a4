//! Inter-correlation enhancement: mining unpaired (moment, text) couples
//! that are each other's nearest neighbour and aligning them as extra
//! positives.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Var};
use crate::encoders::EncodedBatch;
use crate::error::{Error, Result};
use crate::losses::{argmax_first, cosine_matrix, ContrastiveTerms, LossConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Moment–text similarities of one mini-batch: `sims` is `n_m × n` with
/// `n_m = n·T_m`, and `moment_owner[r]` is the (zero-based) batch index of
/// the video that moment row `r` comes from.
#[derive(Debug, Clone)]
pub struct MiningInput {
    pub sims: Array2<f64>,
    pub moment_owner: Vec<usize>,
    pub threshold: f64,
}

impl MiningInput {
    pub fn new(sims: Array2<f64>, moment_owner: Vec<usize>) -> Result<Self> {
        if moment_owner.len() != sims.nrows() {
            return Err(Error::ShapeMismatch {
                what: "moment_owner".into(),
                message: format!("{} owners for {} moment rows", moment_owner.len(), sims.nrows()),
            });
        }
        if let Some(&bad) = moment_owner.iter().find(|&&o| o >= sims.ncols()) {
            return Err(Error::InvalidInput(format!(
                "moment owner {bad} outside a batch of {}",
                sims.ncols()
            )));
        }
        Ok(MiningInput {
            sims,
            moment_owner,
            threshold: DEFAULT_THRESHOLD,
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

/// A selected pseudo-positive: zero-based moment row and text column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoPair {
    pub moment_row: usize,
    pub text_col: usize,
    pub similarity: f64,
}

/// Sets every cell whose moment belongs to the text's own video to −1.
pub fn mask_paired(sims: &Array2<f64>, moment_owner: &[usize]) -> Array2<f64> {
    let mut out = sims.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        if let Some(cell) = row.get_mut(moment_owner[r]) {
            *cell = -1.0;
        }
    }
    out
}

/// Mutual-argmax pairs at or above the threshold, sorted by moment row.
/// `input.sims` must already be masked.
pub fn mine_pseudo_pairs(input: &MiningInput) -> Vec<PseudoPair> {
    let s = &input.sims;
    if s.is_empty() {
        return Vec::new();
    }
    let col_best: Vec<usize> = s
        .columns()
        .into_iter()
        .map(|c| argmax_first(c.iter().copied()).unwrap().0)
        .collect();
    s.rows()
        .into_iter()
        .enumerate()
        .filter_map(|(r, row)| {
            let (j, v) = argmax_first(row.iter().copied()).unwrap();
            (col_best[j] == r && v >= input.threshold && input.moment_owner[r] != j).then_some(PseudoPair {
                moment_row: r,
                text_col: j,
                similarity: v,
            })
        })
        .collect()
}

/// Builds the masked mining input for an encoded batch from detached
/// moment–text cosines.
pub fn batch_mining_input<F: Scalar>(batch: &EncodedBatch<'_, F>, threshold: f64) -> Result<MiningInput> {
    let sims = cosine_matrix(batch.moments_flat.detach(), batch.sentences.detach())
        .value()
        .mapv(|v| v.to_f64());
    let owner = batch.moment_owner();
    let masked = mask_paired(&sims, &owner);
    Ok(MiningInput::new(masked, owner)?.with_threshold(threshold))
}

/// Triplet + λ2·InfoNCE over the pseudo-pair mini-batch; zero when fewer
/// than two pairs were mined.
pub fn ice_loss<'g, F: Scalar>(
    pairs: &[PseudoPair],
    moment_feats: Var<'g, F>,
    text_feats: Var<'g, F>,
    cfg: &LossConfig,
) -> Var<'g, F> {
    let g = moment_feats.graph();
    if pairs.len() < 2 {
        return g.scalar(F::zero());
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.moment_row).collect();
    let cols: Vec<usize> = pairs.iter().map(|p| p.text_col).collect();
    let sims = cosine_matrix(text_feats.select_rows(&cols), moment_feats.select_rows(&rows));
    ContrastiveTerms::new(sims, None, cfg).weighted(cfg.lambda2)
}

/// Result of the ICE step on one batch.
pub struct IceOutcome<'g, F: Scalar> {
    pub loss: Var<'g, F>,
    pub pairs: Vec<PseudoPair>,
    /// Selected pairs whose moment belongs to the text's own video; always 0
    /// unless the mask is broken.
    pub violations: usize,
}

pub fn ice_step<'g, F: Scalar>(
    batch: &EncodedBatch<'g, F>,
    threshold: f64,
    cfg: &LossConfig,
) -> Result<IceOutcome<'g, F>> {
    let input = batch_mining_input(batch, threshold)?;
    let pairs = mine_pseudo_pairs(&input);
    let violations = pairs
        .iter()
        .filter(|p| input.moment_owner[p.moment_row] == p.text_col)
        .count();
    Ok(IceOutcome {
        loss: ice_loss(&pairs, batch.moments_flat, batch.sentences, cfg),
        pairs,
        violations,
    })
}
