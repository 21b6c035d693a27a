//! N-tuplet construction: safety analysis in the current embedding space,
//! weighted sampling and batch-level robust anchor generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index tuplet over a candidate pool: one anchor, one positive from the
/// anchor's class, `n - 2` negatives from the opposite class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NTuplet {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl NTuplet {
    pub fn n(&self) -> usize {
        2 + self.negatives.len()
    }

    /// Member indices in the fixed (anchor, positive, negatives) order.
    pub fn members(&self) -> Vec<usize> {
        let mut m = Vec::with_capacity(self.n());
        m.push(self.anchor);
        m.push(self.positive);
        m.extend_from_slice(&self.negatives);
        m
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyEntry {
    pub index: usize,
    pub safe: bool,
    pub same_class_assurance: f64,
    pub opposite_class_assurance: f64,
    /// Neighbors actually used; smaller than requested k when a class runs short.
    pub same_k_used: usize,
    pub opposite_k_used: usize,
}

/// Per-epoch safety snapshot of the candidate pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyReport {
    pub epoch: usize,
    pub k: usize,
    pub delta: f64,
    pub entries: Vec<SafetyEntry>,
}

impl SafetyReport {
    pub fn safe_flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.safe).collect()
    }

    pub fn safe_count(&self) -> usize {
        self.entries.iter().filter(|e| e.safe).count()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The k nearest same-class and k nearest opposite-class neighbors of `i`
/// under l2 distance, excluding `i`, ties broken toward the lower index.
/// A class with fewer than k members contributes all it has.
pub fn knn_split(
    embeddings: &[Vec<f64>],
    mle_labels: &[u8],
    i: usize,
    k: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::Usage("knn_split needs k >= 1".into()));
    }
    if i >= embeddings.len() || embeddings.len() != mle_labels.len() {
        return Err(Error::Usage("knn_split index out of range".into()));
    }
    let own = mle_labels[i];
    let mut same: Vec<(f64, usize)> = Vec::new();
    let mut opposite: Vec<(f64, usize)> = Vec::new();
    for (j, emb) in embeddings.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = sq_dist(&embeddings[i], emb);
        if mle_labels[j] == own {
            same.push((d, j));
        } else {
            opposite.push((d, j));
        }
    }
    let take = |mut v: Vec<(f64, usize)>| -> Vec<usize> {
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        v.into_iter().take(k).map(|(_, j)| j).collect()
    };
    Ok((take(same), take(opposite)))
}

/// Safe iff the same-class neighbor assurance sum exceeds the opposite-class
/// sum by strictly more than `delta`.
pub fn is_safe(assurances: &[f64], same_nb: &[usize], opp_nb: &[usize], delta: f64) -> bool {
    let same: f64 = same_nb.iter().map(|&j| assurances[j]).sum();
    let opp: f64 = opp_nb.iter().map(|&j| assurances[j]).sum();
    same > opp + delta
}

/// Safety report over a whole pool against a frozen embedding snapshot.
pub fn safety_report(
    embeddings: &[Vec<f64>],
    mle_labels: &[u8],
    assurances: &[f64],
    k: usize,
    delta: f64,
    epoch: usize,
) -> Result<SafetyReport> {
    let mut entries = Vec::with_capacity(embeddings.len());
    for i in 0..embeddings.len() {
        let (same, opp) = knn_split(embeddings, mle_labels, i, k)?;
        let same_sum: f64 = same.iter().map(|&j| assurances[j]).sum();
        let opp_sum: f64 = opp.iter().map(|&j| assurances[j]).sum();
        entries.push(SafetyEntry {
            index: i,
            safe: same_sum > opp_sum + delta,
            same_class_assurance: same_sum,
            opposite_class_assurance: opp_sum,
            same_k_used: same.len(),
            opposite_k_used: opp.len(),
        });
    }
    Ok(SafetyReport {
        epoch,
        k,
        delta,
        entries,
    })
}

/// Affine sampling weights `1 + beta * [safe]`, normalized at draw time.
pub fn sampling_weights(safe_flags: &[bool], beta: f64) -> Vec<f64> {
    safe_flags
        .iter()
        .map(|&s| if s { 1.0 + beta } else { 1.0 })
        .collect()
}

fn weighted_draw(rng: &mut ChaCha8Rng, indices: &[usize], weights: &[f64]) -> usize {
    let total: f64 = indices.iter().map(|&i| weights[i]).sum();
    let mut target = rng.gen::<f64>() * total;
    for &i in indices {
        target -= weights[i];
        if target <= 0.0 {
            return i;
        }
    }
    *indices.last().expect("non-empty draw pool")
}

/// Draw `m` tuplets: anchor by weights over the pool, positive by weights
/// within the anchor's class, negatives by weights without replacement from
/// the opposite class. Deterministic per seed.
pub fn construct_tuplets(
    mle_labels: &[u8],
    weights: &[f64],
    n: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<NTuplet>> {
    if n < 3 {
        return Err(Error::Config(format!("tuplet size n must be >= 3, got {n}")));
    }
    if mle_labels.len() != weights.len() {
        return Err(Error::Shape("labels and weights length mismatch".into()));
    }
    let class0: Vec<usize> = (0..mle_labels.len()).filter(|&i| mle_labels[i] == 0).collect();
    let class1: Vec<usize> = (0..mle_labels.len()).filter(|&i| mle_labels[i] == 1).collect();
    for (name, members, opposite) in [("0", &class0, &class1), ("1", &class1, &class0)] {
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {name} has {} members, tuplet anchors need at least 2",
                members.len()
            )));
        }
        if opposite.len() < n - 2 {
            return Err(Error::Data(format!(
                "class {name} anchors need {} negatives but the opposite class has {}",
                n - 2,
                opposite.len()
            )));
        }
    }
    let all: Vec<usize> = (0..mle_labels.len()).collect();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut tuplets = Vec::with_capacity(m);
    for _ in 0..m {
        let anchor = weighted_draw(&mut rng, &all, weights);
        let (own, opposite) = if mle_labels[anchor] == 0 {
            (&class0, &class1)
        } else {
            (&class1, &class0)
        };
        let positive_pool: Vec<usize> = own.iter().copied().filter(|&i| i != anchor).collect();
        let positive = weighted_draw(&mut rng, &positive_pool, weights);
        let mut negative_pool = opposite.clone();
        let mut negatives = Vec::with_capacity(n - 2);
        for _ in 0..n - 2 {
            let pick = weighted_draw(&mut rng, &negative_pool, weights);
            negative_pool.retain(|&i| i != pick);
            negatives.push(pick);
        }
        tuplets.push(NTuplet {
            anchor,
            positive,
            negatives,
        });
    }
    Ok(tuplets)
}

/// Assurance-weighted combination of the batch anchors in embedding space.
/// Normalized mode divides by the assurance sum; unnormalized mode is the
/// plain weighted sum.
pub fn robust_anchor(
    anchor_embeddings: &[&[f64]],
    assurances: &[f64],
    normalize: bool,
) -> Result<Vec<f64>> {
    if anchor_embeddings.is_empty() {
        return Err(Error::Usage("robust anchor over empty batch".into()));
    }
    if anchor_embeddings.len() != assurances.len() {
        return Err(Error::Shape("anchor and assurance counts differ".into()));
    }
    let total: f64 = assurances.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data(
            "all batch anchors have zero assurance; resample the batch".into(),
        ));
    }
    let dim = anchor_embeddings[0].len();
    let mut out = vec![0.0; dim];
    // normalized mode divides each weight first so a lone anchor (or any
    // anchor with normalized weight exactly 1) passes through bit-exact
    for (emb, &a) in anchor_embeddings.iter().zip(assurances) {
        if emb.len() != dim {
            return Err(Error::Shape("anchor embedding dims differ".into()));
        }
        let w = if normalize { a / total } else { a };
        for (o, &e) in out.iter_mut().zip(emb.iter()) {
            *o += w * e;
        }
    }
    Ok(out)
}
