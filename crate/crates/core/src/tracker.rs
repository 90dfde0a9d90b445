//! First-frame fine-tuning and the per-frame localize / re-estimate / backpropagate loop.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::appearance::{AppearanceError, AppearanceModel, DiagonalGaussian, Label, UpdateConfig};
use crate::container::{self, ContainerError, Tensor, TensorMap};
use crate::feature::FeatureVector;
use crate::geometry::{center_distance, crop_resize, BoundingBox, GeometryError};
use crate::image::ImageBuffer;
use crate::nn::{FcGradients, ForwardCache, Network, NnError};
use crate::sampler::{self, ImageDims, SamplerConfig, SamplerError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error(transparent)]
    Sampling(#[from] SamplerError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("non-finite {what} at fine-tuning iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
    #[error("frame is {found:?}, tracker was initialized on {expected:?}")]
    FrameSize { expected: ImageDims, found: ImageDims },
    #[error("initial box {0:?} is not inside the frame")]
    BoxOutsideFrame(BoundingBox),
    #[error("invalid tracker config: {0}")]
    Config(String),
    #[error("state file is not a tracker state: {0}")]
    NotAState(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub sampler: SamplerConfig,
    pub update: UpdateConfig,
    pub fc_learning_rate: f64,
    /// Global norm cap on each fc gradient step; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Cap on first-frame fc fine-tuning iterations.
    pub init_iterations: usize,
    /// fc updates per accepted frame.
    pub online_iterations: usize,
    /// Minimum tracking score for an online update.
    pub score_gate: f64,
    /// Minimum cosine between the current and the last accepted mean positive feature.
    pub similarity_threshold: f64,
    /// Skip online backpropagation; only the Gaussians adapt.
    pub freeze_net: bool,
    /// Skip the online Gaussian update.
    pub freeze_gaussians: bool,
    /// Return every candidate and its score from [`Tracker::track_frame`].
    pub keep_candidate_scores: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            update: UpdateConfig::default(),
            fc_learning_rate: 1e-3,
            max_grad_norm: Some(DEFAULT_MAX_GRAD_NORM),
            init_iterations: 500,
            online_iterations: 1,
            score_gate: 0.0,
            similarity_threshold: 0.5,
            freeze_net: false,
            freeze_gaussians: false,
            keep_candidate_scores: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        self.sampler.validate()?;
        self.update.validate()?;
        if !(self.fc_learning_rate > 0.0 && self.fc_learning_rate.is_finite()) {
            return Err(TrackerError::Config(format!(
                "fc_learning_rate must be positive, got {}",
                self.fc_learning_rate
            )));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrackerError::Config(format!("max_grad_norm must be positive, got {c}")));
            }
        }
        if !self.score_gate.is_finite() || !self.similarity_threshold.is_finite() {
            return Err(TrackerError::Config("gate thresholds must be finite".into()));
        }
        if self.sampler.n_pos < 2 || self.sampler.n_neg < 2 {
            return Err(TrackerError::Config("n_pos and n_neg must be >= 2 to fit Gaussians".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub freeze_net: bool,
    pub freeze_gaussians: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState<T> {
    pub net: Network<T>,
    pub model: AppearanceModel<T>,
    pub current_box: BoundingBox,
    /// Width over height of the first-frame box.
    pub initial_aspect: f64,
    /// Mean positive feature at the last accepted update.
    pub last_update_feature: FeatureVector<T>,
    pub frame_index: u64,
    pub last_update_frame: u64,
    pub frame_dims: ImageDims,
    pub flags: Flags,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult<T> {
    pub bbox: BoundingBox,
    pub score: T,
    pub updated: bool,
    /// Filled when `keep_candidate_scores` is set.
    pub candidates: Vec<(BoundingBox, T)>,
}

/// Summary of first-frame fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct InitReport {
    pub iterations: usize,
    /// Mean positive score minus mean negative score, per iteration.
    pub gaps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Tracker<T> {
    config: TrackerConfig,
    state: TrackerState<T>,
    init_report: Option<InitReport>,
}

struct Sample<T> {
    features: FeatureVector<T>,
    cache: ForwardCache<T>,
}

fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn dims_of(img: &ImageBuffer) -> ImageDims {
    ImageDims::new(img.width(), img.height())
}

fn extract<T: Scalar>(net: &Network<T>, frame: &ImageBuffer, boxes: &[BoundingBox]) -> Result<Vec<Sample<T>>, TrackerError> {
    let side = net.config().input_size;
    boxes
        .iter()
        .map(|b| {
            let patch = crop_resize(frame, b, side, side)?;
            let (features, cache) = net.forward_features(&patch)?;
            Ok(Sample { features, cache })
        })
        .collect()
}

fn features_of<T: Scalar>(samples: &[Sample<T>]) -> Vec<FeatureVector<T>> {
    samples.iter().map(|s| s.features.clone()).collect()
}

/// Sum over the batch of parameter gradients of `-S` for positives and `+S` for negatives.
fn batch_loss_gradients<T: Scalar>(
    net: &Network<T>,
    model: &AppearanceModel<T>,
    pos: &[Sample<T>],
    neg: &[Sample<T>],
) -> Result<FcGradients<T>, TrackerError> {
    let mut total = FcGradients::zeros_for(net);
    let labeled = pos.iter().map(|s| (s, Label::Positive)).chain(neg.iter().map(|s| (s, Label::Negative)));
    for (s, label) in labeled {
        let ascent = model.score_gradient(&s.features, label)?;
        let descent: Vec<T> = ascent.into_iter().map(|g| -g).collect();
        net.backward_fc_accumulate(&s.cache, &descent, &mut total)?;
    }
    Ok(total)
}

fn clipped<T: Scalar>(mut grads: FcGradients<T>, max_norm: Option<f64>) -> FcGradients<T> {
    if let Some(c) = max_norm {
        grads.clip_norm(T::lit(c));
    }
    grads
}

fn rerun_head<T: Scalar>(net: &Network<T>, samples: &mut [Sample<T>]) -> Result<(), TrackerError> {
    for s in samples.iter_mut() {
        let (features, cache) = net.forward_head(s.cache.fc_input().to_vec())?;
        s.features = features;
        s.cache = cache;
    }
    Ok(())
}

fn mean_score<T: Scalar>(model: &AppearanceModel<T>, samples: &[Sample<T>]) -> Result<f64, TrackerError> {
    let mut acc = 0.0;
    for s in samples {
        acc += model.score(&s.features)?.to_f64_lossy();
    }
    Ok(acc / samples.len() as f64)
}

pub const DEFAULT_MAX_GRAD_NORM: f64 = 1.0;

const PLATEAU_WINDOW: usize = 20;
const PLATEAU_RTOL: f64 = 1e-3;

impl<T: Scalar> Tracker<T> {
    /// Fine-tunes the fc head on samples from the first frame, then fits both Gaussians.
    pub fn initialize(
        first_frame: &ImageBuffer,
        bbox: BoundingBox,
        config: TrackerConfig,
        net: Network<T>,
    ) -> Result<Self, TrackerError> {
        config.validate()?;
        let frame = first_frame.to_gray();
        let dims = dims_of(&frame);
        if bbox.x < 0.0 || bbox.y < 0.0 || bbox.right() > dims.width as f64 || bbox.bottom() > dims.height as f64 {
            return Err(TrackerError::BoxOutsideFrame(bbox));
        }
        let seed = config.sampler.rng_seed;
        let mut rng = frame_rng(seed, 0);
        let pos_boxes = sampler::sample_positives(&bbox, dims, &config.sampler, &mut rng)?;
        let neg_boxes = sampler::sample_negatives(&bbox, dims, &config.sampler, &mut rng)?;

        let mut net = net;
        let mut pos = extract(&net, &frame, &pos_boxes)?;
        let mut neg = extract(&net, &frame, &neg_boxes)?;
        let floor = config.update.variance_floor;
        let mut gaps = Vec::new();
        for iteration in 0..config.init_iterations {
            if iteration > 0 {
                rerun_head(&net, &mut pos)?;
                rerun_head(&net, &mut neg)?;
            }
            let model = AppearanceModel::fit(&features_of(&pos), &features_of(&neg), floor)?;
            let gap = mean_score(&model, &pos)? - mean_score(&model, &neg)?;
            if !gap.is_finite() {
                return Err(TrackerError::NonFinite { what: "score gap", iteration });
            }
            gaps.push(gap);
            if gaps.len() > PLATEAU_WINDOW {
                let past = gaps[gaps.len() - 1 - PLATEAU_WINDOW];
                if (gap - past).abs() <= PLATEAU_RTOL * past.abs() {
                    break;
                }
            }
            let grads = batch_loss_gradients(&net, &model, &pos, &neg)?;
            if !grads.is_finite() {
                return Err(TrackerError::NonFinite { what: "fc gradient", iteration });
            }
            net.apply_sgd(&clipped(grads, config.max_grad_norm), config.fc_learning_rate).map_err(|e| match e {
                NnError::NonFiniteParameters(_) => TrackerError::NonFinite { what: "fc parameters", iteration },
                other => other.into(),
            })?;
        }
        if !gaps.is_empty() {
            rerun_head(&net, &mut pos)?;
            rerun_head(&net, &mut neg)?;
        }
        let pos_features = features_of(&pos);
        let model = AppearanceModel::fit(&pos_features, &features_of(&neg), floor)?;
        let last_update_feature = FeatureVector::mean_of(&pos_features).expect("n_pos >= 2");
        let state = TrackerState {
            net,
            model,
            current_box: bbox,
            initial_aspect: bbox.aspect(),
            last_update_feature,
            frame_index: 0,
            last_update_frame: 0,
            frame_dims: dims,
            flags: Flags {
                freeze_net: config.freeze_net,
                freeze_gaussians: config.freeze_gaussians,
            },
            seed,
        };
        Ok(Self {
            config,
            state,
            init_report: Some(InitReport {
                iterations: gaps.len(),
                gaps,
            }),
        })
    }

    /// Continues tracking from a saved state. The state's freeze flags win over the config.
    pub fn resume(config: TrackerConfig, state: TrackerState<T>) -> Result<Self, TrackerError> {
        config.validate()?;
        if state.model.dim() != state.net.feature_dim() || state.last_update_feature.len() != state.net.feature_dim() {
            return Err(TrackerError::Config("state feature dimensions disagree with the network".into()));
        }
        Ok(Self {
            config,
            state,
            init_report: None,
        })
    }

    pub fn state(&self) -> &TrackerState<T> {
        &self.state
    }

    pub fn into_state(self) -> TrackerState<T> {
        self.state
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn init_report(&self) -> Option<&InitReport> {
        self.init_report.as_ref()
    }

    /// Gate for online updates: the score clears `score_gate` and the mean positive
    /// feature at the new location stays similar to the last accepted one.
    pub fn should_update(&self, score: T, features_at_xstar: &FeatureVector<T>) -> bool {
        score.to_f64_lossy() >= self.config.score_gate
            && features_at_xstar.cosine(&self.state.last_update_feature).to_f64_lossy() >= self.config.similarity_threshold
    }

    fn search_config(&self) -> SamplerConfig {
        let mut cfg = self.config.sampler.clone();
        if self.state.last_update_frame < self.state.frame_index {
            cfg.search_radius = match cfg.search_radius {
                sampler::SearchRadius::Relative(r) => sampler::SearchRadius::Relative(2.0 * r),
                sampler::SearchRadius::Pixels(p) => sampler::SearchRadius::Pixels(2.0 * p),
            };
        }
        cfg
    }

    /// Localizes the target in `frame` and, when the gate passes, adapts the Gaussians and
    /// the fc head.
    pub fn track_frame(&mut self, frame: &ImageBuffer) -> Result<FrameResult<T>, TrackerError> {
        let frame = frame.to_gray();
        let dims = dims_of(&frame);
        if dims != self.state.frame_dims {
            return Err(TrackerError::FrameSize {
                expected: self.state.frame_dims,
                found: dims,
            });
        }
        let frame_index = self.state.frame_index + 1;
        let mut rng = frame_rng(self.state.seed, frame_index);
        let prev = self.state.current_box;
        let candidates = sampler::generate_candidates(&prev, dims, &self.search_config(), &mut rng);

        let net = &self.state.net;
        let scored: Result<Vec<T>, TrackerError> = extract(net, &frame, &candidates.boxes)
            .and_then(|samples| samples.iter().map(|s| Ok(self.state.model.score(&s.features)?)).collect());
        let scores = match scored {
            Ok(s) => s,
            Err(_) => {
                self.state.frame_index = frame_index;
                return Ok(FrameResult {
                    bbox: prev,
                    score: T::neg_infinity(),
                    updated: false,
                    candidates: Vec::new(),
                });
            }
        };

        let mut best = 0;
        for i in 1..scores.len() {
            let (s, b) = (nan_low(scores[i]), nan_low(scores[best]));
            if s > b || (s == b && center_distance(&candidates.boxes[i], &prev) < center_distance(&candidates.boxes[best], &prev)) {
                best = i;
            }
        }
        let raw = candidates.boxes[best];
        let (cx, cy) = raw.center();
        let h = raw.w / self.state.initial_aspect;
        let xstar = BoundingBox { x: cx - raw.w / 2.0, y: cy - h / 2.0, w: raw.w, h }.clamp_into(dims.width, dims.height);
        let best_score = scores[best];

        let updated = self.update_at(&frame, dims, &xstar, best_score, frame_index, &mut rng)?;
        self.state.current_box = xstar;
        self.state.frame_index = frame_index;
        let kept = if self.config.keep_candidate_scores {
            candidates.boxes.into_iter().zip(scores).collect()
        } else {
            Vec::new()
        };
        Ok(FrameResult {
            bbox: xstar,
            score: best_score,
            updated,
            candidates: kept,
        })
    }

    fn update_at(
        &mut self,
        frame: &ImageBuffer,
        dims: ImageDims,
        xstar: &BoundingBox,
        score: T,
        frame_index: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<bool, TrackerError> {
        if score.to_f64_lossy() < self.config.score_gate {
            return Ok(false);
        }
        let cfg = &self.config;
        let pos_boxes = sampler::sample_positives(xstar, dims, &cfg.sampler, rng)?;
        let mut pos = extract(&self.state.net, frame, &pos_boxes)?;
        let pos_features = features_of(&pos);
        let mean_pos = FeatureVector::mean_of(&pos_features).expect("n_pos >= 2");
        if !self.should_update(score, &mean_pos) {
            return Ok(false);
        }
        let neg_boxes = sampler::sample_negatives(xstar, dims, &cfg.sampler, rng)?;
        let mut neg = extract(&self.state.net, frame, &neg_boxes)?;

        let mut model = self.state.model.clone();
        if !self.state.flags.freeze_gaussians {
            let fresh = AppearanceModel::fit(&pos_features, &features_of(&neg), cfg.update.variance_floor)?;
            model = model.ema_update(&fresh, &cfg.update)?;
        }
        let mut net = self.state.net.clone();
        if !self.state.flags.freeze_net {
            for it in 0..cfg.online_iterations {
                if it > 0 {
                    rerun_head(&net, &mut pos)?;
                    rerun_head(&net, &mut neg)?;
                }
                let grads = batch_loss_gradients(&net, &model, &pos, &neg)?;
                net.apply_sgd(&clipped(grads, cfg.max_grad_norm), cfg.fc_learning_rate)?;
            }
        }
        self.state.model = model;
        self.state.net = net;
        self.state.last_update_feature = mean_pos;
        self.state.last_update_frame = frame_index;
        Ok(true)
    }
}

fn nan_low<T: Scalar>(v: T) -> T {
    if v.is_nan() {
        T::neg_infinity()
    } else {
        v
    }
}

fn gaussian_tensors<T: Scalar>(prefix: &str, g: &DiagonalGaussian<T>) -> [Tensor; 2] {
    let f = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect();
    [
        Tensor::vector(format!("{prefix}/mu"), f(&g.mu)),
        Tensor::vector(format!("{prefix}/var"), f(&g.var)),
    ]
}

fn seed_parts(seed: u64) -> [f64; 2] {
    [(seed & 0xffff_ffff) as f64, (seed >> 32) as f64]
}

/// Writes the state as a GDTW container with `net/`, `gauss_pos/`, `gauss_neg/`, `box/`
/// and `state/` sections.
pub fn save_state<T: Scalar>(state: &TrackerState<T>, path: impl AsRef<Path>) -> Result<(), TrackerError> {
    Ok(container::write_file(path, &state_tensors(state))?)
}

pub fn state_tensors<T: Scalar>(state: &TrackerState<T>) -> Vec<Tensor> {
    let mut tensors = state.net.to_tensors("net/");
    tensors.extend(gaussian_tensors("gauss_pos", &state.model.pos));
    tensors.extend(gaussian_tensors("gauss_neg", &state.model.neg));
    let b = &state.current_box;
    tensors.push(Tensor::vector("box/current", vec![b.x, b.y, b.w, b.h]));
    let [lo, hi] = seed_parts(state.seed);
    tensors.push(Tensor::vector(
        "state/meta",
        vec![
            state.initial_aspect,
            state.frame_index as f64,
            state.last_update_frame as f64,
            state.frame_dims.width as f64,
            state.frame_dims.height as f64,
            state.flags.freeze_net as u8 as f64,
            state.flags.freeze_gaussians as u8 as f64,
            lo,
            hi,
        ],
    ));
    tensors.push(Tensor::vector(
        "state/last_update_feature",
        state.last_update_feature.iter().map(|v| v.to_f64_lossy()).collect(),
    ));
    tensors
}

pub fn load_state<T: Scalar>(path: impl AsRef<Path>) -> Result<TrackerState<T>, TrackerError> {
    state_from_tensors(TensorMap::new(container::read_file(path)?))
}

fn section_err(section: &str, reason: impl Into<String>) -> TrackerError {
    TrackerError::Container(ContainerError::Section {
        section: section.to_owned(),
        reason: reason.into(),
    })
}

fn load_gaussian<T: Scalar>(map: &TensorMap, section: &str, dim: usize) -> Result<DiagonalGaussian<T>, TrackerError> {
    let get = |name: &str| {
        map.get_shaped(&format!("{section}/{name}"), &[dim as u32])
            .map_err(|e| section_err(section, e.to_string()))
    };
    let mu = get("mu")?;
    let var = get("var")?;
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(section_err(section, "non-finite mean"));
    }
    if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(section_err(section, "variances must be positive and finite"));
    }
    let conv = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect();
    Ok(DiagonalGaussian::new(conv(mu), conv(var))?)
}

pub fn state_from_tensors<T: Scalar>(map: TensorMap) -> Result<TrackerState<T>, TrackerError> {
    if !map.contains("state/meta") {
        return Err(TrackerError::NotAState("missing `state/meta` section (weights-only file?)".into()));
    }
    let net = Network::<T>::from_tensors(&map, "net/")?;
    let dim = net.feature_dim();
    let pos = load_gaussian(&map, "gauss_pos", dim)?;
    let neg = load_gaussian(&map, "gauss_neg", dim)?;
    let b = map.get_shaped("box/current", &[4]).map_err(|e| section_err("box", e.to_string()))?;
    let current_box = BoundingBox::new(b[0], b[1], b[2], b[3]).map_err(|e| section_err("box", e.to_string()))?;
    let meta = map.get_shaped("state/meta", &[9]).map_err(|e| section_err("state", e.to_string()))?;
    let int = |v: f64| -> Result<u64, TrackerError> {
        if v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15 {
            Ok(v as u64)
        } else {
            Err(section_err("state", format!("expected a non-negative integer, found {v}")))
        }
    };
    let feat = map
        .get_shaped("state/last_update_feature", &[dim as u32])
        .map_err(|e| section_err("state", e.to_string()))?;
    Ok(TrackerState {
        net,
        model: AppearanceModel::new(pos, neg)?,
        current_box,
        initial_aspect: meta[0],
        last_update_feature: FeatureVector::new(feat.iter().map(|&v| T::lit(v)).collect()),
        frame_index: int(meta[1])?,
        last_update_frame: int(meta[2])?,
        frame_dims: ImageDims::new(int(meta[3])? as usize, int(meta[4])? as usize),
        flags: Flags {
            freeze_net: meta[5] != 0.0,
            freeze_gaussians: meta[6] != 0.0,
        },
        seed: int(meta[7])? | (int(meta[8])? << 32),
    })
}
