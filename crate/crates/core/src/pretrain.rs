//! Objectness pretraining: the whole network, conv stack included, is trained with a
//! temporary logistic head to tell object patches from background patches. The head is
//! returned for inspection and is not part of the tracker.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{crop_resize, BoundingBox};
use crate::image::{load_image, ImageBuffer, ImageError};
use crate::nn::{init_network, Network, NetworkConfig, NetworkGradients, NnError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("corpus {0} has no object or no background patches")]
    EmptyCorpus(String),
    #[error("cannot read corpus directory {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("invalid pretraining config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {0}")]
    NonFinite(usize),
}

/// Labeled grayscale patches resized to the network input size.
#[derive(Debug, Clone)]
pub struct PatchCorpus {
    pub patches: Vec<ImageBuffer>,
    /// `true` for object patches.
    pub labels: Vec<bool>,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, PretrainError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| PretrainError::Io {
            path: dir.display().to_string(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn fit_patch(img: &ImageBuffer, side: usize) -> Result<ImageBuffer, PretrainError> {
    let gray = img.to_gray();
    if gray.width() == side && gray.height() == side {
        return Ok(gray);
    }
    let full = BoundingBox {
        x: 0.0,
        y: 0.0,
        w: gray.width() as f64,
        h: gray.height() as f64,
    };
    crop_resize(&gray, &full, side, side).map_err(|e| PretrainError::Config(e.to_string()))
}

impl PatchCorpus {
    /// Reads `dir/object/*` and `dir/background/*` (PGM/PPM), resizing to `side`.
    pub fn load(dir: impl AsRef<Path>, side: usize) -> Result<Self, PretrainError> {
        let dir = dir.as_ref();
        let mut corpus = PatchCorpus {
            patches: Vec::new(),
            labels: Vec::new(),
        };
        for (sub, label) in [("object", true), ("background", false)] {
            let files = list_images(&dir.join(sub))?;
            if files.is_empty() {
                return Err(PretrainError::EmptyCorpus(dir.display().to_string()));
            }
            for f in files {
                corpus.patches.push(fit_patch(&load_image(&f)?, side)?);
                corpus.labels.push(label);
            }
        }
        Ok(corpus)
    }

    pub fn from_patches(patches: Vec<ImageBuffer>, labels: Vec<bool>, side: usize) -> Result<Self, PretrainError> {
        if patches.len() != labels.len() || !labels.contains(&true) || !labels.contains(&false) {
            return Err(PretrainError::EmptyCorpus("<memory>".into()));
        }
        let patches = patches.iter().map(|p| fit_patch(p, side)).collect::<Result<_, _>>()?;
        Ok(Self { patches, labels })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// `p(object | x) = sigmoid(w . x + b)` on the feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticHead<T> {
    pub weight: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> LogisticHead<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![T::zero(); dim],
            bias: T::zero(),
        }
    }

    pub fn logit(&self, x: &[T]) -> T {
        self.weight.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + self.bias
    }

    pub fn probability(&self, x: &[T]) -> T {
        T::one() / (T::one() + (-self.logit(x)).exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub network: NetworkConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient norm cap per step.
    pub max_grad_norm: f64,
    /// Minibatch order.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            learning_rate: 0.01,
            batch_size: 16,
            max_grad_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    pub network: Network<T>,
    pub head: LogisticHead<T>,
    /// Mean minibatch cross-entropy per iteration.
    pub losses: Vec<f64>,
}

/// Trains every layer for `iterations` minibatch steps. With zero iterations the result is
/// exactly `init_network(&cfg.network, cfg.network.seed)`.
pub fn pretrain_objectness<T: Scalar>(corpus: &PatchCorpus, iterations: usize, cfg: &PretrainConfig) -> Result<PretrainOutcome<T>, PretrainError> {
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.max_grad_norm > 0.0) {
        return Err(PretrainError::Config("batch_size, learning_rate and max_grad_norm must be positive".into()));
    }
    if !corpus.labels.contains(&true) || !corpus.labels.contains(&false) {
        return Err(PretrainError::EmptyCorpus("<memory>".into()));
    }
    let mut net: Network<T> = init_network(&cfg.network, cfg.network.seed)?;
    let mut head = LogisticHead::zeros(net.feature_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let lr = T::lit(cfg.learning_rate);
    let mut losses = Vec::with_capacity(iterations);

    for it in 0..iterations {
        let mut grads = NetworkGradients::zeros_for(&net);
        let mut head_w = vec![T::zero(); head.weight.len()];
        let mut head_b = T::zero();
        let mut loss = 0.0;
        let scale = T::one() / T::lit(cfg.batch_size as f64);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let (x, cache) = net.forward_full(&corpus.patches[i])?;
            let p = head.probability(&x);
            let y = if corpus.labels[i] { T::one() } else { T::zero() };
            let eps = 1e-12;
            let pf = p.to_f64_lossy().clamp(eps, 1.0 - eps);
            loss -= if corpus.labels[i] { pf.ln() } else { (1.0 - pf).ln() };
            // d(cross-entropy)/d(logit) = p - y
            let d = (p - y) * scale;
            for (g, &v) in head_w.iter_mut().zip(x.iter()) {
                *g = *g + d * v;
            }
            head_b = head_b + d;
            let grad_x: Vec<T> = head.weight.iter().map(|&w| w * d).collect();
            grads.accumulate(&net.backward_full(&cache, &grad_x)?);
        }
        let loss = loss / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(PretrainError::NonFinite(it));
        }
        losses.push(loss);
        grads.clip_norm(T::lit(cfg.max_grad_norm));
        net.apply_sgd_full(&grads, cfg.learning_rate)?;
        for (w, &g) in head.weight.iter_mut().zip(&head_w) {
            *w = *w - lr * g;
        }
        head.bias = head.bias - lr * head_b;
    }
    Ok(PretrainOutcome {
        network: net,
        head,
        losses,
    })
}

/// Fraction of patches the head classifies correctly at probability 0.5.
pub fn head_accuracy<T: Scalar>(outcome: &PretrainOutcome<T>, corpus: &PatchCorpus) -> Result<f64, PretrainError> {
    let mut correct = 0;
    for (patch, &label) in corpus.patches.iter().zip(&corpus.labels) {
        let (x, _) = outcome.network.forward_features(patch)?;
        if (outcome.head.probability(&x).to_f64_lossy() >= 0.5) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / corpus.len() as f64)
}
