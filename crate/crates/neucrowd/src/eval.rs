//! Downstream evaluation: l2-regularized logistic regression on learned
//! embeddings, accuracy and AUC against expert labels, the majority-vote
//! baseline, and the ablation-grid driver.

use serde::{Deserialize, Serialize};

use crate::crowd::Dataset;
use crate::error::{Error, Result};

/// Linear classifier over the embedding space. `c` is the inverse l2
/// regularization strength.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
}

impl LogRegModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        if self.score(x) > 0.0 {
            1
        } else {
            0
        }
    }
}

pub const MAX_ITERS: usize = 5000;
pub const GRAD_TOL: f64 = 1e-6;

/// Default grid: 9 logarithmic points covering 1e-4 .. 1e4.
pub fn default_c_grid() -> Vec<f64> {
    (-4..=4).map(|e| 10f64.powi(e)).collect()
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        (1.0 + z.exp()).ln()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn objective(model: &LogRegModel, xs: &[Vec<f64>], ys: &[u8]) -> f64 {
    let nll: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let z = model.score(x);
            softplus(z) - y as f64 * z
        })
        .sum();
    let reg: f64 = model.weights.iter().map(|w| w * w).sum::<f64>() / (2.0 * model.c);
    nll + reg
}

fn gradient(model: &LogRegModel, xs: &[Vec<f64>], ys: &[u8]) -> (Vec<f64>, f64) {
    let dim = model.weights.len();
    let mut gw = vec![0.0; dim];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let r = sigmoid(model.score(x)) - y as f64;
        for (g, v) in gw.iter_mut().zip(x) {
            *g += r * v;
        }
        gb += r;
    }
    for (g, w) in gw.iter_mut().zip(&model.weights) {
        *g += w / model.c;
    }
    (gw, gb)
}

/// Full-batch gradient descent with backtracking on the regularized negative
/// log-likelihood; the objective never increases across iterations.
pub fn fit_logreg(xs: &[Vec<f64>], ys: &[u8], c: f64, max_iters: usize) -> Result<LogRegModel> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Usage("fit_logreg needs matching nonempty inputs".into()));
    }
    if ys.iter().all(|&y| y == 0) || ys.iter().all(|&y| y == 1) {
        return Err(Error::Data(
            "single-class training labels: logistic fit is degenerate".into(),
        ));
    }
    let dim = xs[0].len();
    let mut model = LogRegModel {
        weights: vec![0.0; dim],
        bias: 0.0,
        c,
    };
    let mut obj = objective(&model, xs, ys);
    let mut step = 1.0 / xs.len() as f64;
    for _ in 0..max_iters {
        let (gw, gb) = gradient(&model, xs, ys);
        let grad_norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if grad_norm < GRAD_TOL {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial = LogRegModel {
                weights: model
                    .weights
                    .iter()
                    .zip(&gw)
                    .map(|(w, g)| w - step * g)
                    .collect(),
                bias: model.bias - step * gb,
                c,
            };
            let trial_obj = objective(&trial, xs, ys);
            if trial_obj <= obj {
                model = trial;
                obj = trial_obj;
                step *= 1.25;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(model)
}

/// Fit across the grid and keep the C with the best validation accuracy,
/// ties toward the smaller (stronger-regularization) C.
pub fn train_logreg(
    train_xs: &[Vec<f64>],
    train_ys: &[u8],
    val_xs: &[Vec<f64>],
    val_ys: &[u8],
    c_grid: &[f64],
) -> Result<LogRegModel> {
    if c_grid.is_empty() {
        return Err(Error::Usage("empty C grid".into()));
    }
    let mut grid = c_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, LogRegModel)> = None;
    for &c in &grid {
        let model = fit_logreg(train_xs, train_ys, c, MAX_ITERS)?;
        let preds: Vec<u8> = val_xs.iter().map(|x| model.predict(x)).collect();
        let acc = accuracy(&preds, val_ys)?;
        let better = match &best {
            None => true,
            Some((best_acc, _)) => acc > *best_acc,
        };
        if better {
            best = Some((acc, model));
        }
    }
    Ok(best.expect("grid is nonempty").1)
}

/// Mann-Whitney AUC with half credit for tied scores.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("auc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // midranks over tie groups
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Usage("accuracy of empty input".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Shape("preds and labels length mismatch".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub accuracy: f64,
    pub auc: f64,
    pub chosen_c: f64,
    pub seed: u64,
    pub variant: String,
    pub manifest_hash: String,
    /// Labels the downstream classifier was trained on.
    pub train_label_source: String,
}

/// FNV-1a over the manifest bytes, as a short reproducibility fingerprint.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Embed-free sanity baseline: logistic regression on raw features with
/// majority-vote (MLE) labels, evaluated on test truth.
pub fn majority_vote_baseline(
    train: &Dataset,
    validation: &Dataset,
    test: &Dataset,
    c_grid: &[f64],
    seed: u64,
    manifest_hash: &str,
) -> Result<MetricsReport> {
    let train_xs: Vec<Vec<f64>> = train.examples.iter().map(|e| e.features.clone()).collect();
    let val_xs: Vec<Vec<f64>> = validation
        .examples
        .iter()
        .map(|e| e.features.clone())
        .collect();
    let test_xs: Vec<Vec<f64>> = test.examples.iter().map(|e| e.features.clone()).collect();
    let model = train_logreg(
        &train_xs,
        &train.mle_labels(),
        &val_xs,
        &validation.mle_labels(),
        c_grid,
    )?;
    let scores: Vec<f64> = test_xs.iter().map(|x| model.score(x)).collect();
    let preds: Vec<u8> = test_xs.iter().map(|x| model.predict(x)).collect();
    let truth = test.eval_labels();
    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        accuracy: accuracy(&preds, &truth)?,
        auc: auc(&scores, &truth)?,
        chosen_c: model.c,
        seed,
        variant: "majority-vote-baseline".into(),
        manifest_hash: manifest_hash.into(),
        train_label_source: "mle".into(),
    })
}

/// Downstream metrics for a trained embedding network: logistic regression
/// on train embeddings with MLE crowd labels, C chosen on validation,
/// metrics on test truth labels.
pub fn evaluate_embedding_model(
    srl: &crate::nn::DenseNet,
    train: &Dataset,
    validation: &Dataset,
    test: &Dataset,
    c_grid: &[f64],
    seed: u64,
    variant: &str,
    manifest_hash: &str,
) -> Result<MetricsReport> {
    let train_embs = crate::trainer::embed(train, srl)?;
    let val_embs = crate::trainer::embed(validation, srl)?;
    let test_embs = crate::trainer::embed(test, srl)?;
    let model = train_logreg(
        &train_embs,
        &train.mle_labels(),
        &val_embs,
        &validation.mle_labels(),
        c_grid,
    )?;
    let scores: Vec<f64> = test_embs.iter().map(|x| model.score(x)).collect();
    let preds: Vec<u8> = test_embs.iter().map(|x| model.predict(x)).collect();
    let truth = test.eval_labels();
    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        accuracy: accuracy(&preds, &truth)?,
        auc: auc(&scores, &truth)?,
        chosen_c: model.c,
        seed,
        variant: variant.into(),
        manifest_hash: manifest_hash.into(),
        train_label_source: "mle".into(),
    })
}

/// One ablation variant's aggregate over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub runs: Vec<MetricsReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// All 8 knockout combinations, ordered from the triple knockout to the
/// full model.
pub fn ablation_flag_grid() -> Vec<(bool, bool, bool)> {
    vec![
        (false, false, false),
        (false, false, true),
        (true, false, false),
        (false, true, false),
        (true, true, false),
        (false, true, true),
        (true, false, true),
        (true, true, true),
    ]
}

/// Train and evaluate every flag combination for every seed.
pub fn ablation_suite(
    train: &Dataset,
    validation: &Dataset,
    test: &Dataset,
    base_config: &crate::trainer::RunConfig,
    seeds: &[u64],
    manifest_hash: &str,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let grid = default_c_grid();
    let mut rows = Vec::new();
    for (use_sa, use_ra, use_sn) in ablation_flag_grid() {
        let mut runs = Vec::new();
        for &seed in seeds {
            let config = crate::trainer::RunConfig {
                use_sa,
                use_ra,
                use_sn,
                seed,
                ..base_config.clone()
            };
            let outcome = crate::trainer::train(train, validation, &config)?;
            runs.push(evaluate_embedding_model(
                &outcome.srl,
                train,
                validation,
                test,
                &grid,
                seed,
                &config.variant_name(),
                manifest_hash,
            )?);
        }
        let (mean_accuracy, std_accuracy) =
            mean_std(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
        let (mean_auc, std_auc) = mean_std(&runs.iter().map(|r| r.auc).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: runs[0].variant.clone(),
            mean_accuracy,
            std_accuracy,
            mean_auc,
            std_auc,
            runs,
        });
    }
    Ok(rows)
}

/// CSV mirror of the ablation table.
pub fn ablation_csv(rows: &[AblationRow]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut writer = csv::Writer::from_writer(&mut out);
        writer
            .write_record(["variant", "mean_acc", "std_acc", "mean_auc", "std_auc", "seeds"])
            .expect("csv header");
        for row in rows {
            writer
                .write_record([
                    row.variant.clone(),
                    format!("{:.4}", row.mean_accuracy),
                    format!("{:.4}", row.std_accuracy),
                    format!("{:.4}", row.mean_auc),
                    format!("{:.4}", row.std_auc),
                    row.runs.len().to_string(),
                ])
                .expect("csv row");
        }
        writer.flush().expect("csv flush");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let xs: Vec<Vec<f64>> = vec![
            vec![-2.0, 0.0],
            vec![-1.5, 0.5],
            vec![-1.0, -0.5],
            vec![1.0, 0.0],
            vec![1.5, 0.5],
            vec![2.0, -0.5],
        ];
        let ys = vec![0, 0, 0, 1, 1, 1];
        let model = fit_logreg(&xs, &ys, 1e4, MAX_ITERS).unwrap();
        let preds: Vec<u8> = xs.iter().map(|x| model.predict(x)).collect();
        assert_eq!(accuracy(&preds, &ys).unwrap(), 1.0);
    }

    #[test]
    fn strong_regularization_shrinks_weights() {
        let xs: Vec<Vec<f64>> = vec![vec![-1.0], vec![-0.5], vec![0.5], vec![1.0]];
        let ys = vec![0, 0, 1, 1];
        let model = fit_logreg(&xs, &ys, 1e-8, MAX_ITERS).unwrap();
        assert!(model.weights[0].abs() < 1e-3, "w = {}", model.weights[0]);
    }

    #[test]
    fn single_class_labels_rejected() {
        let xs = vec![vec![0.0], vec![1.0]];
        assert!(fit_logreg(&xs, &[1, 1], 1.0, 10).is_err());
    }

    #[test]
    fn objective_matches_independent_newton_solver() {
        // oracle: damped Newton iteration on the same convex objective,
        // implemented independently of the gradient-descent path
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let base = if i < 10 { -1.0 } else { 1.0 };
                vec![base + rng.gen_range(-0.8..0.8), rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let ys: Vec<u8> = (0..20).map(|i| (i >= 10) as u8).collect();
        let c = 10.0;
        let gd = fit_logreg(&xs, &ys, c, MAX_ITERS).unwrap();
        // Newton on params theta = (w0, w1, b)
        let mut theta = [0.3, -0.2, 0.1];
        for _ in 0..200 {
            let mut grad = [theta[0] / c, theta[1] / c, 0.0];
            let mut hess = [[0.0f64; 3]; 3];
            hess[0][0] = 1.0 / c;
            hess[1][1] = 1.0 / c;
            for (x, &y) in xs.iter().zip(&ys) {
                let z = theta[0] * x[0] + theta[1] * x[1] + theta[2];
                let s = sigmoid(z);
                let feats = [x[0], x[1], 1.0];
                for a in 0..3 {
                    grad[a] += (s - y as f64) * feats[a];
                    for b in 0..3 {
                        hess[a][b] += s * (1.0 - s) * feats[a] * feats[b];
                    }
                }
            }
            // solve 3x3 by Cramer
            let det = |m: &[[f64; 3]; 3]| {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            };
            let d = det(&hess);
            let mut delta = [0.0; 3];
            for col in 0..3 {
                let mut m = hess;
                for row in 0..3 {
                    m[row][col] = grad[row];
                }
                delta[col] = det(&m) / d;
            }
            for a in 0..3 {
                theta[a] -= delta[a];
            }
        }
        let newton = LogRegModel {
            weights: vec![theta[0], theta[1]],
            bias: theta[2],
            c,
        };
        let gd_obj = objective(&gd, &xs, &ys);
        let newton_obj = objective(&newton, &xs, &ys);
        assert!(
            (gd_obj - newton_obj).abs() < 1e-6,
            "gd {gd_obj} vs newton {newton_obj}"
        );
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5], &[1, 0, 1]).unwrap(), 0.5);
        // pairs: (0.9,0.8)->1, (0.3,0.8)->0 => 0.5
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert!((accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let preds = [1u8, 0, 1, 0];
        let labels = [1u8, 1, 0, 0];
        let complement: Vec<u8> = preds.iter().map(|&p| 1 - p).collect();
        let a = accuracy(&preds, &labels).unwrap();
        let b = accuracy(&complement, &labels).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
    }

    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(
            n in 4usize..60,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse scores so ties actually occur
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let fast = auc(&scores, &labels).unwrap();
            let brute = brute_force_auc(&scores, &labels);
            prop_assert!((fast - brute).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            n in 4usize..40,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp()).collect();
            let a = auc(&scores, &labels).unwrap();
            let b = auc(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
