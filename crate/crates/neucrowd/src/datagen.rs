//! Synthetic benchmark generator: Gaussian clusters at hypercube vertices
//! plus simulated crowd workers with truncated-normal mislabel rates.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::crowd::{CrowdExample, Dataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_features: usize,
    pub n_informative: usize,
    pub n_clusters: usize,
    pub clusters_per_class: usize,
    pub cube_side: f64,
    pub cluster_std: f64,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_features: 1200,
            n_informative: 10,
            n_clusters: 4,
            clusters_per_class: 2,
            cube_side: 2.0,
            cluster_std: 1.0,
            train_size: 800,
            validation_size: 200,
            test_size: 500,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_informative > self.n_features {
            return Err(Error::Config(format!(
                "n_informative {} exceeds n_features {}",
                self.n_informative, self.n_features
            )));
        }
        if self.n_informative >= usize::BITS as usize
            || self.n_clusters > 1usize << self.n_informative
        {
            return Err(Error::Config(format!(
                "{} clusters need more hypercube vertices than {} informative dims provide",
                self.n_clusters, self.n_informative
            )));
        }
        if self.n_clusters != self.clusters_per_class * 2 {
            return Err(Error::Config(
                "n_clusters must equal 2 * clusters_per_class".into(),
            ));
        }
        if self.train_size == 0 || self.validation_size == 0 || self.test_size == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerParams {
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for WorkerParams {
    fn default() -> Self {
        WorkerParams {
            mean: 0.1,
            std: 0.1,
            lower: 0.01,
            upper: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkerModel {
    pub flip_probs: Vec<f64>,
}

pub const DEFAULT_WORKERS: usize = 7;

/// Per-worker mislabel probabilities from a truncated normal, by rejection.
pub fn sample_worker_flip_probs(d: usize, params: &WorkerParams, seed: u64) -> Result<WorkerModel> {
    if d == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    if params.lower >= params.upper {
        return Err(Error::Config("truncation bounds are inverted".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(params.mean, params.std)
        .map_err(|e| Error::Config(format!("bad worker params: {e}")))?;
    let flip_probs = (0..d)
        .map(|_| loop {
            let v = normal.sample(&mut rng);
            if v >= params.lower && v <= params.upper {
                break v;
            }
        })
        .collect();
    Ok(WorkerModel { flip_probs })
}

/// Crowd label matrix: `y_ij = truth_i XOR Bernoulli(flip_prob_j)`.
pub fn annotate(truth_labels: &[u8], model: &WorkerModel, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truth_labels
        .iter()
        .map(|&t| {
            model
                .flip_probs
                .iter()
                .map(|&p| {
                    if rng.gen::<f64>() < p {
                        1 - t
                    } else {
                        t
                    }
                })
                .collect()
        })
        .collect()
}

/// Hypercube vertex centers: the lexicographically first `n_clusters`
/// vertices of {-s/2, +s/2}^n_informative, classes alternating 0,1,0,1.
fn cluster_centers(config: &SynthConfig) -> Vec<(Vec<f64>, u8)> {
    let half = config.cube_side / 2.0;
    (0..config.n_clusters)
        .map(|c| {
            let center = (0..config.n_informative)
                .map(|dim| {
                    let bit = (c >> (config.n_informative - 1 - dim)) & 1;
                    if bit == 1 {
                        half
                    } else {
                        -half
                    }
                })
                .collect();
            (center, (c % 2) as u8)
        })
        .collect()
}

fn generate_split(
    config: &SynthConfig,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<f64>, u8)>> {
    let centers = cluster_centers(config);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let cluster_noise = Normal::new(0.0, config.cluster_std)
        .map_err(|e| Error::Config(format!("bad cluster std: {e}")))?;
    // balanced classes: round-robin over clusters keeps the split's class
    // ratio at 0.5 up to remainder
    let mut points = Vec::with_capacity(size);
    for i in 0..size {
        let (center, class) = &centers[i % centers.len()];
        let mut features = Vec::with_capacity(config.n_features);
        for dim in 0..config.n_informative {
            features.push(center[dim] + cluster_noise.sample(rng));
        }
        for _ in config.n_informative..config.n_features {
            features.push(noise.sample(rng));
        }
        points.push((features, *class));
    }
    // shuffle so clusters are not ordered within the file
    for i in (1..points.len()).rev() {
        let j = rng.gen_range(0..=i);
        points.swap(i, j);
    }
    Ok(points)
}

#[derive(Debug, Clone)]
pub struct SynDataset {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub worker_model: WorkerModel,
}

/// The full Syn protocol: hypercube Gaussian features with truth labels,
/// then simulated crowd annotations on every split. Deterministic per seed.
pub fn generate_syn(config: &SynthConfig, workers: usize, params: &WorkerParams) -> Result<SynDataset> {
    config.validate()?;
    let model = sample_worker_flip_probs(workers, params, config.seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut make = |split: Split, size: usize, annotate_seed: u64| -> Result<Dataset> {
        let points = generate_split(config, size, &mut rng)?;
        let truth: Vec<u8> = points.iter().map(|(_, c)| *c).collect();
        let labels = annotate(&truth, &model, annotate_seed);
        let examples = points
            .into_iter()
            .zip(labels)
            .map(|((features, class), crowd_labels)| CrowdExample {
                features,
                crowd_labels,
                truth: Some(class),
            })
            .collect();
        Dataset::new(examples, split)
    };
    let train = make(Split::Train, config.train_size, config.seed.wrapping_add(1))?;
    let validation = make(
        Split::Validation,
        config.validation_size,
        config.seed.wrapping_add(2),
    )?;
    let test = make(Split::Test, config.test_size, config.seed.wrapping_add(3))?;
    Ok(SynDataset {
        train,
        validation,
        test,
        worker_model: model,
    })
}

/// Closed-form mean of the truncated normal, the oracle for the sampler's
/// empirical mean.
pub fn truncated_normal_mean(params: &WorkerParams) -> f64 {
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = |x: f64| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let a = (params.lower - params.mean) / params.std;
    let b = (params.upper - params.mean) / params.std;
    params.mean + params.std * (phi(a) - phi(b)) / (cdf(b) - cdf(a))
}

// Abramowitz & Stegun 7.1.26, |error| < 1.5e-7
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}
