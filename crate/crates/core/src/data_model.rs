//! Domain types shared by every other module: boxes, aligned frame pairs,
//! sequences on disk, and the box geometry (overlap, center error) that both
//! training targets and the evaluation protocols are built on.
//!
//! Dataset layout: `<seq>/color/%08d.png`, `<seq>/ir/%08d.png`,
//! `<seq>/groundtruth.txt` (one `x,y,w,h` line per frame) and an optional
//! `<seq>/attributes.txt` (one tag per line from the closed vocabulary).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};

/// The closed 12-tag attribute vocabulary used for per-sequence annotation
/// and attribute-sensitive evaluation breakdowns.
pub const ATTRIBUTE_VOCABULARY: [&str; 12] = [
    "no_occlusion",
    "partial_occlusion",
    "heavy_occlusion",
    "low_illumination",
    "low_resolution",
    "thermal_crossover",
    "deformation",
    "fast_motion",
    "scale_variation",
    "motion_blur",
    "camera_moving",
    "background_clutter",
];

/// Axis-aligned box in image pixels, top-left origin at (0,0).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({x},{y},{w},{h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "non-positive size w={w} h={h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    /// True when the box lies fully inside an image of the given size.
    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width as f64 && self.bottom() <= height as f64
    }
}

/// Intersection-over-union of two valid boxes; 0 when disjoint, exactly 1
/// for identical boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    // union > 0 because both boxes have positive area
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers, in pixels.
pub fn center_error(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

/// Aligned RGB (H×W×3) and TIR (H×W×1) image pair, values in [0,1].
#[derive(Debug, Clone)]
pub struct FramePair {
    pub rgb: Array3<f64>,
    pub tir: Array3<f64>,
    pub index: usize,
}

impl FramePair {
    pub fn new(rgb: Array3<f64>, tir: Array3<f64>, index: usize) -> Result<Self> {
        if rgb.shape()[2] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "rgb must be H×W×3, got {:?}",
                rgb.shape()
            )));
        }
        if tir.shape()[2] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "tir must be H×W×1, got {:?}",
                tir.shape()
            )));
        }
        if rgb.shape()[0] != tir.shape()[0] || rgb.shape()[1] != tir.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "rgb {:?} and tir {:?} differ spatially",
                rgb.shape(),
                tir.shape()
            )));
        }
        for v in rgb.iter().chain(tir.iter()) {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Numeric(format!("frame value {v} outside [0,1]")));
            }
        }
        Ok(Self { rgb, tir, index })
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }
}

/// A named video: aligned frame pairs, one ground-truth box per frame, and
/// optional attribute tags. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<FramePair>,
    pub groundtruth: Vec<BoundingBox>,
    pub attributes: BTreeSet<String>,
}

impl Sequence {
    pub fn new(
        name: String,
        frames: Vec<FramePair>,
        groundtruth: Vec<BoundingBox>,
        attributes: BTreeSet<String>,
    ) -> Result<Self> {
        if frames.len() != groundtruth.len() {
            return Err(Error::GroundtruthMismatch {
                frames: frames.len(),
                boxes: groundtruth.len(),
            });
        }
        if frames.len() < 2 {
            return Err(Error::SequenceTooShort {
                length: frames.len(),
                required: 2,
            });
        }
        for tag in &attributes {
            if !ATTRIBUTE_VOCABULARY.contains(&tag.as_str()) {
                return Err(Error::UnknownAttribute(tag.clone()));
            }
        }
        Ok(Self {
            name,
            frames,
            groundtruth,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Ordered (frame, box) samples drawn from one sequence.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub items: Vec<(FramePair, BoundingBox)>,
}

impl SampleSet {
    pub fn new(items: Vec<(FramePair, BoundingBox)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::ShapeMismatch("sample set is empty".into()));
        }
        let (h, w) = (items[0].0.height(), items[0].0.width());
        for (f, _) in &items {
            if f.height() != h || f.width() != w {
                return Err(Error::ShapeMismatch(
                    "sample set frames differ in spatial size".into(),
                ));
            }
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png") | Some("jpg") | Some("jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0,
    ))
}

fn load_gray(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 1),
        |(y, x, _)| img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0,
    ))
}

/// Parse one `x,y,w,h` groundtruth line. `line_no` is 1-based for messages.
fn parse_box_line(line: &str, line_no: usize) -> Result<BoundingBox> {
    let parts: Vec<&str> = line.trim().split(',').collect();
    if parts.len() != 4 {
        return Err(Error::BoxParse {
            line: line_no,
            message: format!("expected 4 comma-separated values, got {}", parts.len()),
        });
    }
    let mut vals = [0.0f64; 4];
    for (i, p) in parts.iter().enumerate() {
        vals[i] = p.trim().parse::<f64>().map_err(|e| Error::BoxParse {
            line: line_no,
            message: format!("field {}: {e}", i + 1),
        })?;
    }
    BoundingBox::new(vals[0], vals[1], vals[2], vals[3]).map_err(|e| Error::BoxParse {
        line: line_no,
        message: e.to_string(),
    })
}

/// Load and validate a sequence from the on-disk layout. Images are decoded
/// and normalized to [0,1]; boxes are parsed one per line.
pub fn load_sequence(root: &Path) -> Result<Sequence> {
    let color_dir = root.join("color");
    let ir_dir = root.join("ir");
    let gt_path = root.join("groundtruth.txt");
    for required in [&color_dir, &ir_dir, &gt_path] {
        if !required.exists() {
            return Err(Error::DatasetLayout(format!(
                "missing {}",
                required.display()
            )));
        }
    }
    let color_files = list_images(&color_dir)?;
    let ir_files = list_images(&ir_dir)?;
    if color_files.len() != ir_files.len() {
        return Err(Error::FrameCountMismatch {
            color: color_files.len(),
            ir: ir_files.len(),
        });
    }

    let gt_text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let mut groundtruth = Vec::new();
    for (idx, line) in gt_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        groundtruth.push(parse_box_line(line, idx + 1)?);
    }
    if groundtruth.len() != color_files.len() {
        return Err(Error::GroundtruthMismatch {
            frames: color_files.len(),
            boxes: groundtruth.len(),
        });
    }

    let mut frames = Vec::with_capacity(color_files.len());
    for (i, (cpath, ipath)) in color_files.iter().zip(&ir_files).enumerate() {
        frames.push(FramePair::new(load_rgb(cpath)?, load_gray(ipath)?, i)?);
    }

    let mut attributes = BTreeSet::new();
    let attr_path = root.join("attributes.txt");
    if attr_path.exists() {
        let text = fs::read_to_string(&attr_path).map_err(|e| Error::io(&attr_path, e))?;
        for tag in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            attributes.insert(tag.to_string());
        }
    }

    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Sequence::new(name, frames, groundtruth, attributes)
}

fn format_coord(v: f64) -> String {
    // canonical form: integers print without a fractional part
    format!("{v}")
}

/// Canonical groundtruth serialization, one `x,y,w,h` line per box.
pub fn serialize_groundtruth(boxes: &[BoundingBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{},{},{},{}\n",
            format_coord(b.x),
            format_coord(b.y),
            format_coord(b.w),
            format_coord(b.h)
        ));
    }
    out
}

fn save_png_rgb(path: &Path, arr: &Array3<f64>) -> Result<()> {
    let (h, w) = (arr.shape()[0], arr.shape()[1]);
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((arr[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| {
        Error::Image {
            path: path.into(),
            message: e.to_string(),
        }
    })
}

fn save_png_gray(path: &Path, arr: &Array3<f64>) -> Result<()> {
    let (h, w) = (arr.shape()[0], arr.shape()[1]);
    let mut buf = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            buf.push((arr[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::L8).map_err(|e| {
        Error::Image {
            path: path.into(),
            message: e.to_string(),
        }
    })
}

/// Write a sequence to the on-disk layout (quantizes images to 8-bit PNG).
pub fn write_sequence(seq: &Sequence, root: &Path) -> Result<()> {
    let color_dir = root.join("color");
    let ir_dir = root.join("ir");
    fs::create_dir_all(&color_dir).map_err(|e| Error::io(&color_dir, e))?;
    fs::create_dir_all(&ir_dir).map_err(|e| Error::io(&ir_dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        save_png_rgb(&color_dir.join(format!("{i:08}.png")), &frame.rgb)?;
        save_png_gray(&ir_dir.join(format!("{i:08}.png")), &frame.tir)?;
    }
    let gt_path = root.join("groundtruth.txt");
    fs::write(&gt_path, serialize_groundtruth(&seq.groundtruth))
        .map_err(|e| Error::io(&gt_path, e))?;
    if !seq.attributes.is_empty() {
        let attr_path = root.join("attributes.txt");
        let text: String = seq
            .attributes
            .iter()
            .map(|a| format!("{a}\n"))
            .collect();
        fs::write(&attr_path, text).map_err(|e| Error::io(&attr_path, e))?;
    }
    Ok(())
}

/// Discover sequence directories (those containing a groundtruth.txt)
/// directly under `root`, sorted by name.
pub fn list_sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("groundtruth.txt").exists() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
