//! One-pass evaluation: initialize on the first ground-truth box and track to the end.

use gdt_core::nn::{init_network, load_weights};
use gdt_core::tracker::FrameResult;
use gdt_core::{load_image, BoundingBox, ImageBuffer, Network, Tracker, TrackerConfig, TrackerState};

use crate::config::RunConfig;
use crate::dataset::Sequence;
use crate::BenchError;

#[derive(Debug, Clone)]
pub struct OpeRun {
    /// One box per frame; the first is the initialization box.
    pub boxes: Vec<BoundingBox>,
    /// Per-frame results for frames after the first.
    pub frames: Vec<FrameResult<f64>>,
    pub state: TrackerState,
}

/// Network for a run: the configured pretrained weights unless `no_pretrain` is set or no
/// weights are configured, in which case a freshly initialized backbone.
pub fn build_network(cfg: &RunConfig, no_pretrain: bool) -> Result<Network, BenchError> {
    match (&cfg.weights, no_pretrain) {
        (Some(path), false) => Ok(load_weights(path)?),
        _ => Ok(init_network(&cfg.network, cfg.network.seed)?),
    }
}

pub fn run_frames<I>(mut frames: I, init: BoundingBox, cfg: &TrackerConfig, net: Network) -> Result<OpeRun, BenchError>
where
    I: Iterator<Item = Result<ImageBuffer, BenchError>>,
{
    let first = frames.next().ok_or_else(|| BenchError::Synth("sequence has no frames".into()))??;
    let mut tracker = Tracker::initialize(&first, init, cfg.clone(), net)?;
    let mut boxes = vec![init];
    let mut results = Vec::new();
    for frame in frames {
        let r = tracker.track_frame(&frame?)?;
        boxes.push(r.bbox);
        results.push(r);
    }
    Ok(OpeRun {
        boxes,
        frames: results,
        state: tracker.into_state(),
    })
}

pub fn run_ope(seq: &Sequence, cfg: &TrackerConfig, net: Network) -> Result<OpeRun, BenchError> {
    let init = *seq.gt.first().ok_or(BenchError::CountMismatch { frames: seq.frames.len(), boxes: 0 })?;
    let frames = seq.frames.iter().map(|p| load_image(p).map_err(BenchError::from));
    run_frames(frames, init, cfg, net)
}

/// Runs in-memory frames (synthetic sequences).
pub fn run_ope_images(frames: &[ImageBuffer], init: BoundingBox, cfg: &TrackerConfig, net: Network) -> Result<OpeRun, BenchError> {
    run_frames(frames.iter().cloned().map(Ok), init, cfg, net)
}
