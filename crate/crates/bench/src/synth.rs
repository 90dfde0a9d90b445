//! Synthetic sequences: a textured target drifting over a smooth static background.

use std::fs;
use std::path::{Path, PathBuf};

use gdt_core::{crop_resize, save_image, BoundingBox, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::dataset::{write_boxes, Sequence};
use crate::BenchError;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub target_w: usize,
    pub target_h: usize,
    /// Pixels per frame; the target bounces off the image border.
    pub velocity: (f64, f64),
    pub noise_sigma: f64,
    /// Half-open 0-based frame range `[start, end)` where the target is fully covered.
    pub occlusion: Option<(usize, usize)>,
    /// Relative size change per frame.
    pub scale_drift: f64,
    /// Initial top-left corner; defaults to a seeded position.
    pub start: Option<(f64, f64)>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            frames: 100,
            width: 320,
            height: 240,
            target_w: 40,
            target_h: 40,
            velocity: (2.0, 1.0),
            noise_sigma: 8.0,
            occlusion: None,
            scale_drift: 0.0,
            start: None,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Synth(m));
        if self.frames == 0 {
            return bad("need at least one frame".into());
        }
        if self.target_w < 4 || self.target_h < 4 || self.target_w * 2 > self.width || self.target_h * 2 > self.height {
            return bad(format!(
                "target {}x{} must be at least 4x4 and at most half of the {}x{} image",
                self.target_w, self.target_h, self.width, self.height
            ));
        }
        let (vx, vy) = self.velocity;
        if !vx.is_finite() || !vy.is_finite() || vx.abs() >= (self.width - self.target_w) as f64 || vy.abs() >= (self.height - self.target_h) as f64 {
            return bad(format!("velocity ({vx}, {vy}) would leave the frame"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be non-negative", self.noise_sigma));
        }
        if !(self.scale_drift.abs() < 0.2) {
            return bad(format!("scale drift {} out of range", self.scale_drift));
        }
        if let Some((a, b)) = self.occlusion {
            if a >= b {
                return bad(format!("empty occlusion interval {a}:{b}"));
            }
        }
        Ok(())
    }
}

/// Rendered sequence kept in memory.
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub frames: Vec<ImageBuffer>,
    pub gt: Vec<BoundingBox>,
    pub occluded: Vec<bool>,
}

fn background(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.005..0.03),
                rng.gen_range(0.005..0.03),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(8.0..20.0),
            )
        })
        .collect();
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let v: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 * std::f64::consts::TAU + fy * y as f64 * std::f64::consts::TAU + ph).sin())
                .sum();
            out[y * width + x] = 128.0 + v;
        }
    }
    out
}

/// Blocky high-contrast texture.
fn target_texture(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let block = 8;
    let bw = w.div_ceil(block);
    let bh = h.div_ceil(block);
    let levels: Vec<u8> = (0..bw * bh)
        .map(|_| if rng.gen_bool(0.5) { rng.gen_range(10..70) } else { rng.gen_range(180..250) })
        .collect();
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(levels[(y / block) * bw + x / block]);
        }
    }
    ImageBuffer::new(w, h, 1, data).expect("texture shape")
}

fn reflect(pos: f64, vel: f64, hi: f64) -> (f64, f64) {
    let mut p = pos + vel;
    let mut v = vel;
    if p < 0.0 {
        p = -p;
        v = -v;
    } else if p > hi {
        p = 2.0 * hi - p;
        v = -v;
    }
    (p.clamp(0.0, hi), v)
}

pub fn render(params: &SynthParams, seed: u64) -> Result<SynthSequence, BenchError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (params.width, params.height);
    let bg = background(w, h, &mut rng);
    let texture = target_texture(params.target_w, params.target_h, &mut rng);
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let (mut px, mut py) = params.start.unwrap_or_else(|| {
        (
            rng.gen_range(0.2..0.5) * (w - params.target_w) as f64,
            rng.gen_range(0.2..0.5) * (h - params.target_h) as f64,
        )
    });
    let (mut vx, mut vy) = params.velocity;
    let mut size = (params.target_w as f64, params.target_h as f64);

    let mut seq = SynthSequence {
        frames: Vec::with_capacity(params.frames),
        gt: Vec::with_capacity(params.frames),
        occluded: Vec::with_capacity(params.frames),
    };
    for f in 0..params.frames {
        if f > 0 {
            size = (size.0 * (1.0 + params.scale_drift), size.1 * (1.0 + params.scale_drift));
            let max_w = (w / 2) as f64;
            if size.0 > max_w {
                size = (max_w, max_w * params.target_h as f64 / params.target_w as f64);
            }
            (px, vx) = reflect(px, vx, w as f64 - size.0.round());
            (py, vy) = reflect(py, vy, h as f64 - size.1.round());
        }
        let tw = (size.0.round() as usize).max(4);
        let th = (size.1.round() as usize).max(4);
        let x0 = (px.round() as usize).min(w - tw);
        let y0 = (py.round() as usize).min(h - th);
        let sprite = if tw == texture.width() && th == texture.height() {
            texture.clone()
        } else {
            let full = BoundingBox::new(0.0, 0.0, texture.width() as f64, texture.height() as f64).expect("texture box");
            crop_resize(&texture, &full, tw, th).expect("texture resample")
        };
        let occluded = params.occlusion.is_some_and(|(a, b)| (a..b).contains(&f));

        let mut canvas = bg.clone();
        for y in 0..th {
            for x in 0..tw {
                canvas[(y0 + y) * w + x0 + x] = sprite.get(x, y, 0) as f64;
            }
        }
        if occluded {
            // a flat panel 1.5x the target, centred on it
            let ow = tw as f64 * 1.5;
            let oh = th as f64 * 1.5;
            let cx = x0 as f64 + tw as f64 / 2.0;
            let cy = y0 as f64 + th as f64 / 2.0;
            let xa = (cx - ow / 2.0).floor().max(0.0) as usize;
            let ya = (cy - oh / 2.0).floor().max(0.0) as usize;
            let xb = ((cx + ow / 2.0).ceil() as usize).min(w);
            let yb = ((cy + oh / 2.0).ceil() as usize).min(h);
            for y in ya..yb {
                canvas[y * w + xa..y * w + xb].fill(120.0);
            }
        }
        let data = canvas
            .iter()
            .map(|&v| {
                let n = if params.noise_sigma > 0.0 { rng.sample(noise) } else { 0.0 };
                (v + n).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        seq.frames.push(ImageBuffer::new(w, h, 1, data).expect("frame shape"));
        seq.gt.push(BoundingBox::new(x0 as f64, y0 as f64, tw as f64, th as f64).expect("gt box"));
        seq.occluded.push(occluded);
    }
    Ok(seq)
}

/// Renders and writes `img/NNNN.pgm`, `groundtruth_rect.txt`, `occlusion.txt` and
/// `attributes.txt` under `out_dir`.
pub fn synth_sequence(params: &SynthParams, seed: u64, out_dir: impl AsRef<Path>) -> Result<Sequence, BenchError> {
    let out_dir = out_dir.as_ref();
    let seq = render(params, seed)?;
    let img_dir = out_dir.join("img");
    fs::create_dir_all(&img_dir).map_err(|e| BenchError::io(&img_dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::with_capacity(seq.frames.len());
    for (i, frame) in seq.frames.iter().enumerate() {
        let p = img_dir.join(format!("{:04}.pgm", i + 1));
        save_image(frame, &p)?;
        paths.push(p);
    }
    write_boxes(out_dir.join("groundtruth_rect.txt"), &seq.gt)?;
    let occ: String = seq.occluded.iter().enumerate().map(|(i, &o)| format!("{},{}\n", i + 1, o as u8)).collect();
    let occ_path = out_dir.join("occlusion.txt");
    fs::write(&occ_path, occ).map_err(|e| BenchError::io(&occ_path, e))?;
    let mut attrs = Vec::new();
    if params.occlusion.is_some() {
        attrs.push("OCC");
    }
    if params.scale_drift != 0.0 {
        attrs.push("SV");
    }
    let attr_path = out_dir.join("attributes.txt");
    fs::write(&attr_path, attrs.join(",")).map_err(|e| BenchError::io(&attr_path, e))?;
    Ok(Sequence {
        frames: paths,
        gt: seq.gt,
        attributes: attrs.iter().map(|a| a.parse().expect("known tag")).collect(),
    })
}

/// Object/background patch corpus for objectness pretraining. Each sample pastes a block
/// texture into a smooth background; `object/` holds crops roughly centred on it and
/// `background/` holds crops at least half a side away, so they show at most part of it.
pub fn synth_corpus(dir: impl AsRef<Path>, per_class: usize, side: usize, seed: u64) -> Result<(), BenchError> {
    let dir = dir.as_ref();
    if side < 8 {
        return Err(BenchError::Synth(format!("corpus patch side {side} is below 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 8.0).expect("valid sigma");
    for class in ["object", "background"] {
        let sub = dir.join(class);
        fs::create_dir_all(&sub).map_err(|e| BenchError::io(&sub, e))?;
    }
    let span = 3 * side;
    let jitter = (side / 10) as i64;
    for i in 0..per_class {
        let mut canvas = background(span, span, &mut rng);
        let tex = target_texture(side, side, &mut rng);
        for y in 0..side {
            for x in 0..side {
                canvas[(side + y) * span + side + x] = tex.get(x, y, 0) as f64;
            }
        }
        let crop = |ox: usize, oy: usize, rng: &mut ChaCha8Rng| {
            let data = (0..side * side)
                .map(|k| (canvas[(oy + k / side) * span + ox + k % side] + rng.sample(noise)).round().clamp(0.0, 255.0) as u8)
                .collect();
            ImageBuffer::new(side, side, 1, data).expect("patch shape")
        };
        let s = side as i64;
        let obj = crop((s + rng.gen_range(-jitter..=jitter)) as usize, (s + rng.gen_range(-jitter..=jitter)) as usize, &mut rng);
        let (dx, dy) = loop {
            let d = (rng.gen_range(-s..=s), rng.gen_range(-s..=s));
            if d.0.abs().max(d.1.abs()) >= s / 2 {
                break d;
            }
        };
        let bg = crop((s + dx) as usize, (s + dy) as usize, &mut rng);
        save_image(&obj, dir.join("object").join(format!("{i:05}.pgm")))?;
        save_image(&bg, dir.join("background").join(format!("{i:05}.pgm")))?;
    }
    Ok(())
}
