//! Tuplet sampling network: a weight-shared trunk per tuplet position, a
//! head over the concatenated trunk outputs, hardness selection, and the
//! square-loss regression onto observed SRL losses.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adadelta_step, AdadeltaState, Checkpoint, DenseNet, ParamGrads};
use crate::tuplet::NTuplet;

/// Shared trunk applied to each of the n raw feature vectors plus a head
/// mapping their concatenation to a scalar hardness score.
#[derive(Debug, Clone)]
pub struct SamplerNet {
    pub trunk: DenseNet,
    pub head: DenseNet,
    pub n: usize,
}

impl SamplerNet {
    pub fn init(
        n_features: usize,
        trunk_hidden: &[usize],
        head_hidden: &[usize],
        n: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if n < 3 {
            return Err(Error::Config("sampler tuplet size must be >= 3".into()));
        }
        let mut trunk_dims = vec![n_features];
        trunk_dims.extend_from_slice(trunk_hidden);
        let trunk = DenseNet::init(&trunk_dims, dropout, seed)?;
        let mut head_dims = vec![n * trunk.output_dim()];
        head_dims.extend_from_slice(head_hidden);
        head_dims.push(1);
        let head = DenseNet::init(&head_dims, dropout, seed.wrapping_add(1))?;
        Ok(SamplerNet { trunk, head, n })
    }

    /// Deterministic eval-mode score for one tuplet.
    pub fn score(&self, tuplet: &NTuplet, features: &[Vec<f64>]) -> Result<f64> {
        if tuplet.n() != self.n {
            return Err(Error::Shape(format!(
                "tuplet size {} vs sampler n {}",
                tuplet.n(),
                self.n
            )));
        }
        let mut concat = Vec::with_capacity(self.head.input_dim());
        for idx in tuplet.members() {
            let features = features
                .get(idx)
                .ok_or_else(|| Error::Usage(format!("tuplet index {idx} out of range")))?;
            concat.extend(self.trunk.forward_eval(features)?);
        }
        Ok(self.head.forward_eval(&concat)?[0])
    }

    pub fn score_tuplets(&self, tuplets: &[NTuplet], features: &[Vec<f64>]) -> Result<Vec<f64>> {
        tuplets.iter().map(|t| self.score(t, features)).collect()
    }
}

/// A tuplet paired with its predicted hardness and, once the SRL step has
/// run, the observed loss used as the regression target.
#[derive(Debug, Clone)]
pub struct HardnessRecord {
    pub tuplet_index: usize,
    pub score: f64,
    pub observed_loss: Option<f64>,
}

/// Top `ceil(fraction * count)` records by score, ties toward the lower
/// tuplet index, returned score-descending.
pub fn select_hard(records: &[HardnessRecord], fraction: f64) -> Result<Vec<usize>> {
    if records.is_empty() {
        return Err(Error::Usage("select_hard over empty records".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "hard fraction must be in (0,1], got {fraction}"
        )));
    }
    let take = ((fraction * records.len() as f64).ceil() as usize).min(records.len());
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .score
            .partial_cmp(&records[a].score)
            .unwrap()
            .then(records[a].tuplet_index.cmp(&records[b].tuplet_index))
    });
    order.truncate(take);
    Ok(order)
}

pub struct SamplerOptimizer {
    pub trunk_state: AdadeltaState,
    pub head_state: AdadeltaState,
}

impl SamplerOptimizer {
    pub fn new(sampler: &SamplerNet) -> Self {
        SamplerOptimizer {
            trunk_state: AdadeltaState::new(&sampler.trunk),
            head_state: AdadeltaState::new(&sampler.head),
        }
    }
}

/// One Adadelta step on the mean squared error between train-mode scores and
/// observed SRL losses. Records without an observed loss are skipped; if none
/// carry one, nothing happens and the returned MSE is `None`.
pub fn sampler_update(
    sampler: &mut SamplerNet,
    tuplets: &[NTuplet],
    features: &[Vec<f64>],
    records: &[HardnessRecord],
    optimizer: &mut SamplerOptimizer,
    learning_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    let targets: Vec<(usize, f64)> = records
        .iter()
        .filter_map(|r| r.observed_loss.map(|l| (r.tuplet_index, l)))
        .collect();
    if targets.is_empty() {
        return Ok(None);
    }
    let count = targets.len() as f64;
    let mut trunk_grads = ParamGrads::zeros_like(&sampler.trunk);
    let mut head_grads = ParamGrads::zeros_like(&sampler.head);
    let mut mse = 0.0;
    let trunk_out = sampler.trunk.output_dim();
    for (tuplet_index, target) in targets {
        let tuplet = tuplets
            .get(tuplet_index)
            .ok_or_else(|| Error::Usage(format!("record index {tuplet_index} out of range")))?;
        let members = tuplet.members();
        let mut concat = Vec::with_capacity(sampler.head.input_dim());
        let mut trunk_caches = Vec::with_capacity(members.len());
        for &idx in &members {
            let (out, cache) = sampler.trunk.forward(&features[idx], true, Some(rng))?;
            concat.extend(out);
            trunk_caches.push(cache);
        }
        let (out, head_cache) = sampler.head.forward(&concat, true, Some(rng))?;
        let score = out[0];
        let err = score - target;
        mse += err * err / count;
        // d(mean squared error)/d score
        let (hg, concat_grad) = sampler.head.backward(&head_cache, &[2.0 * err / count])?;
        head_grads.add_assign(&hg);
        for (pos, cache) in trunk_caches.iter().enumerate() {
            let chunk = &concat_grad[pos * trunk_out..(pos + 1) * trunk_out];
            let (tg, _) = sampler.trunk.backward(cache, chunk)?;
            trunk_grads.add_assign(&tg);
        }
    }
    adadelta_step(
        &mut sampler.trunk,
        &trunk_grads,
        &mut optimizer.trunk_state,
        learning_rate,
    )?;
    adadelta_step(
        &mut sampler.head,
        &head_grads,
        &mut optimizer.head_state,
        learning_rate,
    )?;
    Ok(Some(mse))
}

/// Two-part checkpoint reusing the dense-net format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerCheckpoint {
    pub trunk: Checkpoint,
    pub head: Checkpoint,
    pub n: usize,
}

impl SamplerCheckpoint {
    pub fn from_net(sampler: &SamplerNet) -> Self {
        SamplerCheckpoint {
            trunk: Checkpoint::from_net(&sampler.trunk),
            head: Checkpoint::from_net(&sampler.head),
            n: sampler.n,
        }
    }

    pub fn into_net(self) -> Result<SamplerNet> {
        let trunk = self.trunk.into_net()?;
        let head = self.head.into_net()?;
        if head.input_dim() != self.n * trunk.output_dim() {
            return Err(Error::Parse(
                "sampler head input does not chain with trunk output".into(),
            ));
        }
        Ok(SamplerNet {
            trunk,
            head,
            n: self.n,
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("sampler checkpoint serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes)
            .map_err(|e| crate::error::Error::Parse(format!("bad sampler checkpoint: {e}")))
    }
}
