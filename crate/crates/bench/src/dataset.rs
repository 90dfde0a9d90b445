//! OTB-style sequence directories.
//!
//! Ground-truth and results files hold one `x,y,w,h` line per frame in 1-based pixel
//! coordinates (comma, tab or space separated). They are shifted to 0-based boxes here
//! and nowhere else.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gdt_core::BoundingBox;

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    IV,
    OCC,
    SV,
    DEF,
    MB,
    FM,
    IPR,
    OPR,
    OV,
    BC,
    LR,
}

impl Attribute {
    pub const ALL: [Attribute; 11] = [
        Attribute::IV,
        Attribute::OCC,
        Attribute::SV,
        Attribute::DEF,
        Attribute::MB,
        Attribute::FM,
        Attribute::IPR,
        Attribute::OPR,
        Attribute::OV,
        Attribute::BC,
        Attribute::LR,
    ];
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Attribute {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_uppercase();
        Attribute::ALL
            .into_iter()
            .find(|a| a.to_string() == t)
            .ok_or_else(|| BenchError::Parse {
                file: "attributes".into(),
                line: 0,
                reason: format!("unknown attribute `{s}`"),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<PathBuf>,
    /// 0-based boxes.
    pub gt: Vec<BoundingBox>,
    pub attributes: Vec<Attribute>,
}

impl Sequence {
    pub fn name(&self) -> String {
        self.frames
            .first()
            .and_then(|p| p.parent()?.parent()?.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Parses one `x,y,w,h` line (1-based) into a 0-based box.
pub fn parse_box_line(line: &str) -> Result<BoundingBox, String> {
    let parts: Vec<&str> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 values, found {}", parts.len()));
    }
    let mut v = [0.0; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse::<f64>().map_err(|_| format!("`{p}` is not a number"))?;
    }
    BoundingBox::new(v[0] - 1.0, v[1] - 1.0, v[2], v[3]).map_err(|e| e.to_string())
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<BoundingBox>, BenchError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_box_line(l).map_err(|reason| BenchError::Parse {
                file: path.display().to_string(),
                line: i + 1,
                reason,
            })
        })
        .collect()
}

/// Formats boxes as 1-based integer `x,y,w,h` lines.
pub fn format_boxes(boxes: &[BoundingBox]) -> String {
    boxes
        .iter()
        .map(|b| {
            let (x, y, w, h) = b.to_int_tuple(1);
            format!("{x},{y},{w},{h}\n")
        })
        .collect()
}

pub fn write_boxes(path: impl AsRef<Path>, boxes: &[BoundingBox]) -> Result<(), BenchError> {
    let path = path.as_ref();
    fs::write(path, format_boxes(boxes)).map_err(|e| BenchError::io(path, e))
}

/// Loads `dir/img/*` (sorted by name), `dir/groundtruth_rect.txt` and, when present,
/// `dir/attributes.txt`.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<Sequence, BenchError> {
    let dir = dir.as_ref();
    let img_dir = dir.join("img");
    let mut frames: Vec<PathBuf> = fs::read_dir(&img_dir)
        .map_err(|e| BenchError::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    frames.sort();
    let gt = read_boxes(dir.join("groundtruth_rect.txt"))?;
    if gt.len() != frames.len() {
        return Err(BenchError::CountMismatch {
            frames: frames.len(),
            boxes: gt.len(),
        });
    }
    let attr_path = dir.join("attributes.txt");
    let attributes = if attr_path.exists() {
        let text = fs::read_to_string(&attr_path).map_err(|e| BenchError::io(&attr_path, e))?;
        text.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(Sequence { frames, gt, attributes })
}
