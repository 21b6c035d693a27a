//! Joint training loop: pool embedding, safety analysis, tuplet
//! construction, hardness selection, SRL updates and sampler regression.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crowd::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{adadelta_step, AdadeltaState, DenseNet, ParamGrads};
use crate::sampler::{self, HardnessRecord, SamplerNet, SamplerOptimizer};
use crate::srl::{self, SrlHyper};
use crate::tuplet::{self, NTuplet, SafetyReport};

/// Every knob of the training run, with the published defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Tuplet size.
    pub n: usize,
    /// Batch size b; the hard set H has this many tuplets.
    pub batch_size: usize,
    /// Tuplet pool size per epoch; 3·b so the 1/3 selection fills one batch.
    pub pool_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience on validation AUC, in epochs.
    pub patience: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    /// Safety margin δ.
    pub delta: f64,
    /// Safe-example weight bonus β.
    pub beta: f64,
    pub hard_fraction: f64,
    /// Similarity offset C.
    pub c: f64,
    /// Softmax scale η.
    pub eta: f64,
    pub embedding_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// SRL gradient steps per epoch on the selected batch.
    pub steps_per_epoch: usize,
    pub init_stddev: f64,
    /// Recompute the safety report every this many epochs.
    pub safety_every: usize,
    /// Normalize the robust anchor by the assurance sum.
    pub normalize_robust_anchor: bool,
    /// Include the anchor in the posterior's denominator.
    pub anchor_in_denominator: bool,
    pub seed: u64,
    /// Safety-aware sampling.
    pub use_sa: bool,
    /// Robust anchor generation.
    pub use_ra: bool,
    /// Hardness sampling network.
    pub use_sn: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 5,
            batch_size: 64,
            pool_size: 192,
            max_epochs: 160,
            patience: 160,
            learning_rate: 0.3,
            dropout: 0.2,
            delta: 0.0,
            beta: 2.0,
            hard_fraction: 1.0 / 3.0,
            c: 1.0,
            eta: 0.2,
            embedding_dim: 128,
            hidden_sizes: vec![256],
            steps_per_epoch: 1,
            init_stddev: 0.05,
            safety_every: 1,
            normalize_robust_anchor: true,
            anchor_in_denominator: false,
            seed: 0,
            use_sa: true,
            use_ra: true,
            use_sn: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Config(format!("n must be >= 3, got {}", self.n)));
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "hard_fraction must be in (0,1], got {}",
                self.hard_fraction
            )));
        }
        if self.batch_size == 0
            || self.pool_size == 0
            || self.max_epochs == 0
            || self.steps_per_epoch == 0
            || self.embedding_dim == 0
            || self.safety_every == 0
        {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if self.eta <= 0.0 {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        Ok(())
    }

    /// k for the safety kNN: floor(sqrt(batch size)), at least 1.
    pub fn safety_k(&self) -> usize {
        ((self.batch_size as f64).sqrt().floor() as usize).max(1)
    }

    pub fn srl_hyper(&self) -> SrlHyper {
        SrlHyper {
            c: self.c,
            eta: self.eta,
            anchor_in_denominator: self.anchor_in_denominator,
        }
    }

    /// Paper-style variant name derived from the ablation flags.
    pub fn variant_name(&self) -> String {
        let mut name = String::from("NeuCrowd");
        if !self.use_sa {
            name.push_str("-SA");
        }
        if !self.use_ra {
            name.push_str("-RA");
        }
        if !self.use_sn {
            name.push_str("-SN");
        }
        name
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub srl_loss: f64,
    pub sampler_mse: Option<f64>,
    pub safe_count: usize,
    pub selected_count: usize,
    pub val_auc: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.epochs {
            out.extend(serde_json::to_vec(e).expect("epoch stats serialize"));
            out.push(b'\n');
        }
        out
    }
}

pub struct TrainOutcome {
    pub srl: DenseNet,
    pub sampler: SamplerNet,
    pub history: TrainHistory,
    pub safety_reports: Vec<SafetyReport>,
}

/// Eval-mode embedding of every example.
pub fn embed(dataset: &Dataset, net: &DenseNet) -> Result<Vec<Vec<f64>>> {
    dataset
        .examples
        .iter()
        .map(|ex| net.forward_eval(&ex.features))
        .collect()
}

fn mix_seed(seed: u64, stream: u64, epoch: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x
}

/// Strongly regularized so the probe ranks embeddings by signal rather than
/// by how easily 800 points separate in a high-dimensional space.
const PROBE_C: f64 = 1e-3;

/// Cheap validation AUC for early stopping: a fixed-C logistic probe on the
/// current embeddings, scored against the validation MLE labels.
fn validation_auc(
    srl: &DenseNet,
    train: &Dataset,
    train_labels: &[u8],
    validation: &Dataset,
    val_labels: &[u8],
) -> Result<f64> {
    let train_embs = embed(train, srl)?;
    let val_embs = embed(validation, srl)?;
    let model = eval::fit_logreg(&train_embs, train_labels, PROBE_C, 300)?;
    let scores: Vec<f64> = val_embs.iter().map(|x| model.score(x)).collect();
    eval::auc(&scores, val_labels)
}

struct TrainState {
    srl: DenseNet,
    srl_opt: AdadeltaState,
    sampler: SamplerNet,
    sampler_opt: SamplerOptimizer,
    dropout_rng: ChaCha8Rng,
}

/// One SRL Adadelta step on the selected batch. Returns the mean loss and
/// the per-tuplet losses observed during the step.
fn srl_step(state: &mut TrainState, batch: &[&NTuplet], features: &[Vec<f64>], assurances: &[f64], labels: &[u8], config: &RunConfig) -> Result<(f64, Vec<f64>)> {
    // train-mode forward per occurrence; each keeps its own dropout mask
    let hyper = config.srl_hyper();
    let mut occurrence_embs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(batch.len());
    let mut occurrence_caches = Vec::with_capacity(batch.len());
    for t in batch {
        let mut embs = Vec::with_capacity(t.n());
        let mut caches = Vec::with_capacity(t.n());
        for idx in t.members() {
            let (out, cache) =
                state
                    .srl
                    .forward(&features[idx], true, Some(&mut state.dropout_rng))?;
            embs.push(out);
            caches.push(cache);
        }
        occurrence_embs.push(embs);
        occurrence_caches.push(caches);
    }

    // robust anchors over the anchors' train-mode embeddings, one per
    // anchor-class partition of the batch: a single class-mixed mean would
    // pull both classes toward the same point and the tuplets' gradients
    // would cancel
    let anchor_assurances: Vec<f64> = batch.iter().map(|t| assurances[t.anchor]).collect();
    let mut group_of = vec![usize::MAX; batch.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut robusts: Vec<Vec<f64>> = Vec::new();
    let mut group_totals: Vec<f64> = Vec::new();
    if config.use_ra {
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, t) in batch.iter().enumerate() {
            by_class[usize::from(labels[t.anchor])].push(i);
        }
        for members in by_class.into_iter().filter(|m| !m.is_empty()) {
            let anchor_refs: Vec<&[f64]> = members
                .iter()
                .map(|&i| occurrence_embs[i][0].as_slice())
                .collect();
            let assur: Vec<f64> = members.iter().map(|&i| anchor_assurances[i]).collect();
            let robust =
                tuplet::robust_anchor(&anchor_refs, &assur, config.normalize_robust_anchor)?;
            for &i in &members {
                group_of[i] = groups.len();
            }
            group_totals.push(assur.iter().sum());
            groups.push(members);
            robusts.push(robust);
        }
    }

    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamGrads::zeros_like(&state.srl);
    let mut total_loss = 0.0;
    let mut tuplet_losses = Vec::with_capacity(batch.len());
    // robust-anchor gradients accumulated per group, then distributed to
    // every contributing anchor occurrence by its assurance weight
    let mut robust_grads = vec![vec![0.0; state.srl.output_dim()]; groups.len()];
    for (b_idx, t) in batch.iter().enumerate() {
        let embs = &occurrence_embs[b_idx];
        let caches = &occurrence_caches[b_idx];
        let anchor_emb: &[f64] = if config.use_ra {
            &robusts[group_of[b_idx]]
        } else {
            &embs[0]
        };
        let cand_refs: Vec<&[f64]> = embs[1..].iter().map(Vec::as_slice).collect();
        let mut cand_assur = vec![assurances[t.positive]];
        cand_assur.extend(t.negatives.iter().map(|&i| assurances[i]));
        let rec = srl::tuplet_loss_embs(
            anchor_emb,
            &cand_refs,
            &cand_assur,
            assurances[t.anchor],
            &hyper,
        )?;
        total_loss += rec.loss;
        tuplet_losses.push(rec.loss);
        for (cand_pos, grad) in rec.grad_candidates.iter().enumerate() {
            let scaled: Vec<f64> = grad.iter().map(|g| g * scale).collect();
            let (pg, _) = state.srl.backward(&caches[cand_pos + 1], &scaled)?;
            grads.add_assign(&pg);
        }
        if config.use_ra {
            for (rg, g) in robust_grads[group_of[b_idx]].iter_mut().zip(&rec.grad_anchor) {
                *rg += g * scale;
            }
        } else {
            let scaled: Vec<f64> = rec.grad_anchor.iter().map(|g| g * scale).collect();
            let (pg, _) = state.srl.backward(&caches[0], &scaled)?;
            grads.add_assign(&pg);
        }
    }
    for (g_idx, members) in groups.iter().enumerate() {
        for &b_idx in members {
            let weight = if config.normalize_robust_anchor {
                anchor_assurances[b_idx] / group_totals[g_idx]
            } else {
                anchor_assurances[b_idx]
            };
            if weight == 0.0 {
                continue;
            }
            let scaled: Vec<f64> = robust_grads[g_idx].iter().map(|g| g * weight).collect();
            let (pg, _) = state.srl.backward(&occurrence_caches[b_idx][0], &scaled)?;
            grads.add_assign(&pg);
        }
    }
    adadelta_step(&mut state.srl, &grads, &mut state.srl_opt, config.learning_rate)?;
    Ok((total_loss * scale, tuplet_losses))
}

/// The full joint loop. Deterministic per seed. Returns the parameters that
/// scored the best validation AUC.
pub fn train(train_set: &Dataset, validation: &Dataset, config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let n_features = train_set.n_features();
    let assurances = train_set.assurances();
    let mle_labels = train_set.mle_labels();
    let val_labels = validation.mle_labels();
    let features: Vec<Vec<f64>> = train_set
        .examples
        .iter()
        .map(|e| e.features.clone())
        .collect();
    {
        // fail fast on tuplet infeasibility
        let weights = vec![1.0; mle_labels.len()];
        tuplet::construct_tuplets(&mle_labels, &weights, config.n, 0, 0)?;
    }

    let mut srl_dims = vec![n_features];
    srl_dims.extend_from_slice(&config.hidden_sizes);
    srl_dims.push(config.embedding_dim);
    let srl = DenseNet::init_with_stddev(
        &srl_dims,
        config.dropout,
        mix_seed(config.seed, 1, 0),
        config.init_stddev,
    )?;
    let mut sampler_trunk = config.hidden_sizes.clone();
    sampler_trunk.push(config.embedding_dim);
    let sampler = SamplerNet::init(
        n_features,
        &sampler_trunk,
        &[config.embedding_dim],
        config.n,
        config.dropout,
        mix_seed(config.seed, 2, 0),
    )?;
    let mut state = TrainState {
        srl_opt: AdadeltaState::new(&srl),
        sampler_opt: SamplerOptimizer::new(&sampler),
        srl,
        sampler,
        dropout_rng: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3, 0)),
    };

    let mut history = TrainHistory::default();
    let mut safety_reports = Vec::new();
    let mut best: Option<(f64, DenseNet, SamplerNet)> = None;
    let mut epochs_since_best = 0usize;
    let mut safety: Option<SafetyReport> = None;

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        // (a) frozen embedding snapshot of the pool
        let embeddings = embed(train_set, &state.srl)?;
        // (b) safety-aware weights
        let weights = if config.use_sa {
            if safety.is_none() || epoch % config.safety_every == 0 {
                let report = tuplet::safety_report(
                    &embeddings,
                    &mle_labels,
                    &assurances,
                    config.safety_k(),
                    config.delta,
                    epoch,
                )?;
                safety_reports.push(report.clone());
                safety = Some(report);
            }
            tuplet::sampling_weights(&safety.as_ref().unwrap().safe_flags(), config.beta)
        } else {
            vec![1.0; train_set.len()]
        };
        let safe_count = safety.as_ref().map(SafetyReport::safe_count).unwrap_or(0);
        // (c) fresh tuplet pool
        let tuplets = tuplet::construct_tuplets(
            &mle_labels,
            &weights,
            config.n,
            config.pool_size,
            mix_seed(config.seed, 4, epoch as u64),
        )?;
        // (d) hardness selection; epoch 0 bootstraps with a uniform draw
        // because the sampler is untrained
        let selected: Vec<usize> = if config.use_sn && epoch > 0 {
            let scores = state.sampler.score_tuplets(&tuplets, &features)?;
            let records: Vec<HardnessRecord> = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| HardnessRecord {
                    tuplet_index: i,
                    score: s,
                    observed_loss: None,
                })
                .collect();
            sampler::select_hard(&records, config.hard_fraction)?
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 5, epoch as u64));
            let take = ((config.hard_fraction * tuplets.len() as f64).ceil() as usize)
                .min(tuplets.len());
            let mut order: Vec<usize> = (0..tuplets.len()).collect();
            order.shuffle(&mut rng);
            order.truncate(take);
            order
        };
        let batch: Vec<&NTuplet> = selected.iter().map(|&i| &tuplets[i]).collect();
        // (e)+(f) robust anchor substitution and SRL update
        let mut mean_loss = 0.0;
        let mut observed = Vec::new();
        for _ in 0..config.steps_per_epoch {
            let (loss, losses) =
                srl_step(&mut state, &batch, &features, &assurances, &mle_labels, config)?;
            mean_loss = loss;
            observed = losses;
        }
        // (g) sampler regression on the observed losses
        let sampler_mse = if config.use_sn {
            let records: Vec<HardnessRecord> = selected
                .iter()
                .zip(&observed)
                .map(|(&tuplet_index, &loss)| HardnessRecord {
                    tuplet_index,
                    score: 0.0,
                    observed_loss: Some(loss),
                })
                .collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 6, epoch as u64));
            sampler::sampler_update(
                &mut state.sampler,
                &tuplets,
                &features,
                &records,
                &mut state.sampler_opt,
                config.learning_rate,
                &mut rng,
            )?
        } else {
            None
        };

        let val_auc = validation_auc(&state.srl, train_set, &mle_labels, validation, &val_labels)?;
        history.epochs.push(EpochStats {
            epoch,
            srl_loss: mean_loss,
            sampler_mse,
            safe_count,
            selected_count: batch.len(),
            val_auc,
            wall_secs: started.elapsed().as_secs_f64(),
        });

        let improved = best.as_ref().map(|(b, _, _)| val_auc > *b).unwrap_or(true);
        if improved {
            best = Some((val_auc, state.srl.clone(), state.sampler.clone()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                break;
            }
        }
    }

    let (_, srl, sampler) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        srl,
        sampler,
        history,
        safety_reports,
    })
}
