//! Assurance-weighted softmax objective over an n-tuplet and its gradients
//! with respect to the member embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tuplet::NTuplet;

/// Smoothing added under the square root of the l2 distance so an anchor
/// coincident with a candidate stays differentiable.
const DIST_SMOOTH: f64 = 1e-12;
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SrlHyper {
    /// Similarity offset C.
    pub c: f64,
    /// Softmax scale, > 0.
    pub eta: f64,
    /// Include the anchor itself in the softmax denominator. Off by default:
    /// the anchor is the conditioning side, candidates are the positive and
    /// the negatives.
    pub anchor_in_denominator: bool,
}

impl Default for SrlHyper {
    fn default() -> Self {
        SrlHyper {
            c: 1.0,
            eta: 1.0,
            anchor_in_denominator: false,
        }
    }
}

impl SrlHyper {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// `C - ||a - b||` with the smoothed distance.
pub fn similarity(a: &[f64], b: &[f64], c: f64) -> f64 {
    c - smoothed_dist(a, b)
}

fn smoothed_dist(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq + DIST_SMOOTH).sqrt()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Posterior probability of the positive. `candidates[0]` is the positive,
/// the rest are negatives; `anchor_assurance` only matters when the hyper's
/// anchor-in-denominator flag is set.
pub fn posterior(
    anchor_emb: &[f64],
    candidate_embs: &[&[f64]],
    candidate_assurances: &[f64],
    anchor_assurance: f64,
    hyper: &SrlHyper,
) -> Result<f64> {
    let record = tuplet_loss_embs(
        anchor_emb,
        candidate_embs,
        candidate_assurances,
        anchor_assurance,
        hyper,
    )?;
    Ok(record.posterior)
}

/// Loss record for one tuplet: posterior, `-log p`, and exact gradients
/// w.r.t. every candidate embedding and the anchor embedding.
#[derive(Debug, Clone)]
pub struct TupletLossRecord {
    pub tuplet_index: usize,
    pub posterior: f64,
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    /// Same order as the candidates (positive first).
    pub grad_candidates: Vec<Vec<f64>>,
    /// Softmax over the candidates, retained for diagnostics.
    pub probabilities: Vec<f64>,
}

/// Core loss/gradient computation on raw embeddings.
pub fn tuplet_loss_embs(
    anchor_emb: &[f64],
    candidate_embs: &[&[f64]],
    candidate_assurances: &[f64],
    anchor_assurance: f64,
    hyper: &SrlHyper,
) -> Result<TupletLossRecord> {
    hyper.validate()?;
    if candidate_embs.is_empty() {
        return Err(Error::Usage("tuplet loss needs candidates".into()));
    }
    if candidate_embs.len() != candidate_assurances.len() {
        return Err(Error::Shape("candidate and assurance counts differ".into()));
    }
    let dim = anchor_emb.len();
    if candidate_embs.iter().any(|e| e.len() != dim) {
        return Err(Error::Shape("candidate embedding dims differ from anchor".into()));
    }
    let dists: Vec<f64> = candidate_embs
        .iter()
        .map(|e| smoothed_dist(e, anchor_emb))
        .collect();
    let mut logits: Vec<f64> = dists
        .iter()
        .zip(candidate_assurances)
        .map(|(&d, &a)| hyper.eta * a * (hyper.c - d))
        .collect();
    if hyper.anchor_in_denominator {
        // the anchor's own term: distance 0 (up to smoothing), constant
        // w.r.t. the embeddings
        logits.push(hyper.eta * anchor_assurance * (hyper.c - DIST_SMOOTH.sqrt()));
    }
    let probs = softmax(&logits);
    let p_pos = probs[0].max(PROB_FLOOR);
    let loss = -p_pos.ln();

    let n_cand = candidate_embs.len();
    let mut grad_anchor = vec![0.0; dim];
    let mut grad_candidates = Vec::with_capacity(n_cand);
    for j in 0..n_cand {
        // dL/d logit_j = p_j - [j == positive]
        let dl = probs[j] - if j == 0 { 1.0 } else { 0.0 };
        let coeff = -dl * hyper.eta * candidate_assurances[j] / dists[j];
        let mut grad = vec![0.0; dim];
        for k in 0..dim {
            let diff = candidate_embs[j][k] - anchor_emb[k];
            grad[k] = coeff * diff;
            grad_anchor[k] -= coeff * diff;
        }
        grad_candidates.push(grad);
    }
    Ok(TupletLossRecord {
        tuplet_index: 0,
        posterior: p_pos,
        loss,
        grad_anchor,
        grad_candidates,
        probabilities: probs[..n_cand].to_vec(),
    })
}

/// Mean loss over a batch of tuplets against a shared embedding table.
/// `anchor_override` substitutes the batch-level robust anchor for every
/// tuplet's own anchor embedding.
pub fn batch_loss(
    tuplets: &[NTuplet],
    embeddings: &[Vec<f64>],
    assurances: &[f64],
    anchor_override: Option<&[f64]>,
    hyper: &SrlHyper,
) -> Result<(f64, Vec<TupletLossRecord>)> {
    if tuplets.is_empty() {
        return Err(Error::Usage("batch loss over empty batch".into()));
    }
    let mut records = Vec::with_capacity(tuplets.len());
    let mut total = 0.0;
    for (idx, t) in tuplets.iter().enumerate() {
        let anchor_emb: &[f64] = match anchor_override {
            Some(a) => a,
            None => &embeddings[t.anchor],
        };
        let mut cand_embs: Vec<&[f64]> = vec![&embeddings[t.positive]];
        cand_embs.extend(t.negatives.iter().map(|&i| embeddings[i].as_slice()));
        let mut cand_assur = vec![assurances[t.positive]];
        cand_assur.extend(t.negatives.iter().map(|&i| assurances[i]));
        let mut record = tuplet_loss_embs(
            anchor_emb,
            &cand_embs,
            &cand_assur,
            assurances[t.anchor],
            hyper,
        )?;
        record.tuplet_index = idx;
        total += record.loss;
        records.push(record);
    }
    Ok((total / tuplets.len() as f64, records))
}
