//! Positive, negative and candidate box generation.

use rand::Rng;
use thiserror::Error;

use crate::geometry::{center_distance, iou, BoundingBox};

/// Draw budget shared by one call of a rejection sampler.
pub const MAX_DRAWS: usize = 10_000;

/// Smallest box side produced by the sampler.
pub const MIN_SIDE: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("{kind} sampling gave up after {draws} draws with {accepted} accepted (box too close to the border or image too small)")]
    Exhausted {
        kind: &'static str,
        draws: usize,
        accepted: usize,
    },
    #[error("invalid sampler config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl ImageDims {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchRadius {
    /// Multiple of `max(w, h)` of the previous box.
    Relative(f64),
    Pixels(f64),
}

impl SearchRadius {
    pub fn resolve(&self, prev: &BoundingBox) -> f64 {
        match *self {
            SearchRadius::Relative(f) => f * prev.w.max(prev.h),
            SearchRadius::Pixels(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    pub pos_min_iou: f64,
    pub neg_max_iou: f64,
    /// Minimum negative center distance as a fraction of the box diagonal.
    pub neg_min_center_dist: f64,
    pub search_radius: SearchRadius,
    pub n_candidates: usize,
    pub n_scales: usize,
    pub scale_step: f64,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_pos: 32,
            n_neg: 96,
            pos_min_iou: 0.8,
            neg_max_iou: 0.2,
            neg_min_center_dist: 0.5,
            search_radius: SearchRadius::Relative(0.6),
            n_candidates: 300,
            n_scales: 3,
            scale_step: 0.02,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let fail = |m: String| Err(SamplerError::Config(m));
        if self.n_scales == 0 || self.n_scales.is_multiple_of(2) {
            return fail(format!("n_scales must be odd and >= 1, got {}", self.n_scales));
        }
        if !(self.scale_step > 0.0 && self.scale_step < 1.0) {
            return fail(format!("scale_step must lie in (0, 1), got {}", self.scale_step));
        }
        if !(self.pos_min_iou > self.neg_max_iou) || !(0.0..=1.0).contains(&self.pos_min_iou) || self.neg_max_iou < 0.0 {
            return fail(format!(
                "need 0 <= neg_max_iou ({}) < pos_min_iou ({}) <= 1",
                self.neg_max_iou, self.pos_min_iou
            ));
        }
        let radius = match self.search_radius {
            SearchRadius::Relative(r) | SearchRadius::Pixels(r) => r,
        };
        if !(radius >= 0.0 && radius.is_finite()) || !(self.neg_min_center_dist >= 0.0) {
            return fail("search radius and negative distance must be finite and non-negative".into());
        }
        if self.n_candidates == 0 {
            return fail("n_candidates must be >= 1".into());
        }
        Ok(())
    }
}

/// Candidate boxes scored in one frame; `scales[i]` is the multiplier applied to the
/// previous box to obtain `boxes[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub boxes: Vec<BoundingBox>,
    pub scales: Vec<f64>,
}

fn fit_into(b: BoundingBox, dims: ImageDims) -> BoundingBox {
    let grow = (MIN_SIDE / b.w).max(MIN_SIDE / b.h).max(1.0);
    let sized = BoundingBox {
        w: b.w * grow,
        h: b.h * grow,
        ..b
    };
    let (cx, cy) = b.center();
    BoundingBox::from_center(cx, cy, sized.w, sized.h)
        .unwrap_or(sized)
        .clamp_into(dims.width, dims.height)
}

/// Boxes around `bbox` with IoU at least `pos_min_iou`; the first is `bbox` itself.
pub fn sample_positives<R: Rng + ?Sized>(
    bbox: &BoundingBox,
    dims: ImageDims,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<BoundingBox>, SamplerError> {
    let t = cfg.pos_min_iou;
    let mut out = Vec::with_capacity(cfg.n_pos);
    if cfg.n_pos == 0 {
        return Ok(out);
    }
    out.push(*bbox);
    // a pure shift of d along one axis has IoU (w - d) / (w + d); beyond this no draw passes
    let reach = (1.0 - t) / (1.0 + t);
    let (dx_max, dy_max) = (bbox.w * reach, bbox.h * reach);
    let (cx, cy) = bbox.center();
    let mut draws = 0;
    while out.len() < cfg.n_pos {
        if draws >= MAX_DRAWS {
            return Err(SamplerError::Exhausted {
                kind: "positive",
                draws,
                accepted: out.len(),
            });
        }
        draws += 1;
        let dx = if dx_max > 0.0 { rng.gen_range(-dx_max..=dx_max) } else { 0.0 };
        let dy = if dy_max > 0.0 { rng.gen_range(-dy_max..=dy_max) } else { 0.0 };
        let cand = BoundingBox {
            x: cx + dx - bbox.w / 2.0,
            y: cy + dy - bbox.h / 2.0,
            ..*bbox
        }
        .clamp_into(dims.width, dims.height);
        if iou(&cand, bbox) >= t {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Same-size boxes placed uniformly over the image, kept when they overlap `bbox` by at
/// most `neg_max_iou` and their center is at least `neg_min_center_dist` diagonals away.
pub fn sample_negatives<R: Rng + ?Sized>(
    bbox: &BoundingBox,
    dims: ImageDims,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<BoundingBox>, SamplerError> {
    let mut out = Vec::with_capacity(cfg.n_neg);
    let base = bbox.clamp_into(dims.width, dims.height);
    let min_dist = cfg.neg_min_center_dist * bbox.diagonal();
    let x_hi = dims.width as f64 - base.w;
    let y_hi = dims.height as f64 - base.h;
    let mut draws = 0;
    while out.len() < cfg.n_neg {
        if draws >= MAX_DRAWS {
            return Err(SamplerError::Exhausted {
                kind: "negative",
                draws,
                accepted: out.len(),
            });
        }
        draws += 1;
        let x = if x_hi > 0.0 { rng.gen_range(0.0..=x_hi) } else { 0.0 };
        let y = if y_hi > 0.0 { rng.gen_range(0.0..=y_hi) } else { 0.0 };
        let cand = BoundingBox { x, y, ..base };
        if iou(&cand, bbox) <= cfg.neg_max_iou && center_distance(&cand, bbox) >= min_dist {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Scale step raised so one step changes the shorter side by at least one pixel.
pub fn effective_scale_step(bbox: &BoundingBox, step: f64) -> f64 {
    step.max(1.0 / bbox.w.min(bbox.h))
}

/// Scale multipliers `1 + k * step` for `k` in `-(n/2)..=n/2`.
pub fn scale_levels(bbox: &BoundingBox, cfg: &SamplerConfig) -> Vec<f64> {
    let step = effective_scale_step(bbox, cfg.scale_step);
    let half = (cfg.n_scales / 2) as i64;
    (-half..=half).map(|k| 1.0 + k as f64 * step).filter(|s| *s > 0.0).collect()
}

/// Candidates around `prev`: first the previous center at every pyramid level, then
/// centers uniform in a disc of the search radius, cycling through the levels.
pub fn generate_candidates<R: Rng + ?Sized>(
    prev: &BoundingBox,
    dims: ImageDims,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> CandidateSet {
    let levels = scale_levels(prev, cfg);
    let radius = cfg.search_radius.resolve(prev);
    let (pcx, pcy) = prev.center();
    let mut boxes = Vec::with_capacity(cfg.n_candidates);
    let mut scales = Vec::with_capacity(cfg.n_candidates);
    // level order puts scale 1 first so the unscaled previous box is candidate 0
    let mid = levels.len() / 2;
    let order: Vec<f64> = std::iter::once(levels[mid])
        .chain(levels.iter().enumerate().filter(|(i, _)| *i != mid).map(|(_, &s)| s))
        .collect();
    for i in 0..cfg.n_candidates {
        let scale = order[i % order.len()];
        let (cx, cy) = if i < order.len() || radius <= 0.0 {
            (pcx, pcy)
        } else {
            let r = radius * rng.gen::<f64>().sqrt();
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            (pcx + r * theta.cos(), pcy + r * theta.sin())
        };
        let w = prev.w * scale;
        let h = prev.h * scale;
        let b = BoundingBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        };
        boxes.push(fit_into(b, dims));
        scales.push(scale);
    }
    CandidateSet { boxes, scales }
}
