//! Run configuration files: UTF-8 `key = value` lines with `#` comments.
//!
//! Unset keys keep their defaults. Unknown keys, duplicate keys and malformed values are
//! errors reported with the line number.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gdt_core::{Activation, ConvStage, NetworkConfig, SearchRadius, TrackerConfig, VarianceCrossTerm};

use crate::BenchError;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub network: NetworkConfig,
    /// Pretrained backbone; relative paths are resolved against the config file.
    pub weights: Option<PathBuf>,
}

impl RunConfig {
    /// Seeds both the sampler streams and the network initialization.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.tracker.sampler.rng_seed = seed;
        self.network.seed = seed;
        self
    }
}

pub const KEYS: &[&str] = &[
    "n_pos",
    "n_neg",
    "pos_min_iou",
    "neg_max_iou",
    "neg_min_center_dist",
    "search_radius",
    "search_radius_px",
    "n_candidates",
    "n_scales",
    "scale_step",
    "seed",
    "gamma",
    "variance_floor",
    "variance_cross_term",
    "fc_learning_rate",
    "max_grad_norm",
    "init_iterations",
    "online_iterations",
    "score_gate",
    "similarity_threshold",
    "freeze_net",
    "freeze_gaussians",
    "input_size",
    "conv_spec",
    "fc6_dim",
    "feature_dim",
    "fc7_activation",
    "net_seed",
    "weights",
];

fn num<V: FromStr>(v: &str) -> Result<V, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

/// `kernel/stride/out_channels` stages separated by commas, e.g. `5/1/8, 3/1/16`.
pub fn parse_conv_spec(v: &str) -> Result<Vec<ConvStage>, String> {
    if v.trim().is_empty() || v.trim() == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|stage| {
            let parts: Vec<&str> = stage.trim().split('/').collect();
            match parts.as_slice() {
                [k, s, c] => Ok(ConvStage::new(num(k.trim())?, num(s.trim())?, num(c.trim())?)),
                _ => Err(format!("conv stage `{}` must be kernel/stride/channels", stage.trim())),
            }
        })
        .collect()
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str, base: &Path) -> Result<(), String> {
    let t = &mut cfg.tracker;
    let s = &mut t.sampler;
    match key {
        "n_pos" => s.n_pos = num(v)?,
        "n_neg" => s.n_neg = num(v)?,
        "pos_min_iou" => s.pos_min_iou = num(v)?,
        "neg_max_iou" => s.neg_max_iou = num(v)?,
        "neg_min_center_dist" => s.neg_min_center_dist = num(v)?,
        "search_radius" => s.search_radius = SearchRadius::Relative(num(v)?),
        "search_radius_px" => s.search_radius = SearchRadius::Pixels(num(v)?),
        "n_candidates" => s.n_candidates = num(v)?,
        "n_scales" => s.n_scales = num(v)?,
        "scale_step" => s.scale_step = num(v)?,
        "seed" => s.rng_seed = num(v)?,
        "gamma" => t.update.gamma = num(v)?,
        "variance_floor" => t.update.variance_floor = num(v)?,
        "variance_cross_term" => {
            t.update.cross_term = match v {
                "sigma_diff" => VarianceCrossTerm::SigmaDiff,
                "mu_diff" => VarianceCrossTerm::MuDiff,
                _ => return Err(format!("`{v}` is not sigma_diff or mu_diff")),
            }
        }
        "fc_learning_rate" => t.fc_learning_rate = num(v)?,
        "max_grad_norm" => t.max_grad_norm = if v == "none" { None } else { Some(num(v)?) },
        "init_iterations" => t.init_iterations = num(v)?,
        "online_iterations" => t.online_iterations = num(v)?,
        "score_gate" => t.score_gate = num(v)?,
        "similarity_threshold" => t.similarity_threshold = num(v)?,
        "freeze_net" => t.freeze_net = boolean(v)?,
        "freeze_gaussians" => t.freeze_gaussians = boolean(v)?,
        "input_size" => cfg.network.input_size = num(v)?,
        "conv_spec" => cfg.network.conv_spec = parse_conv_spec(v)?,
        "fc6_dim" => cfg.network.fc6_dim = num(v)?,
        "feature_dim" => cfg.network.feature_dim = num(v)?,
        "fc7_activation" => {
            cfg.network.fc7_activation = match v {
                "relu" => Activation::Relu,
                "identity" => Activation::Identity,
                _ => return Err(format!("`{v}` is not relu or identity")),
            }
        }
        "net_seed" => cfg.network.seed = num(v)?,
        "weights" => cfg.weights = Some(base.join(v)),
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

pub fn parse_config(text: &str, file: &str, base: &Path) -> Result<RunConfig, BenchError> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |reason: String| BenchError::Parse {
            file: file.into(),
            line: i + 1,
            reason,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if seen.iter().any(|k| k == key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        apply(&mut cfg, key, value, base).map_err(err)?;
        seen.push(key.to_owned());
    }
    cfg.tracker.validate()?;
    cfg.network.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, BenchError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, &path.display().to_string(), base)
}
