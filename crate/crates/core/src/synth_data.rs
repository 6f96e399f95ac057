//! Paired RGB-T data generation.
//!
//! Two sources: a deterministic pseudo-TIR transform that turns an RGB
//! dataset into an aligned RGB-T dataset (a stand-in for a learned
//! image-to-image translator, behind the [`TirTranslator`] seam), and a toy
//! sequence generator producing moving-target videos with complementary
//! per-modality corruption windows for training and ordering experiments.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data_model::{self, BoundingBox, FramePair, Sequence};
use crate::error::{Error, Result};

/// Configuration of the deterministic pseudo-TIR transform.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Per-channel luminance weights; non-negative, sum to 1.
    pub luminance_weights: [f64; 3],
    /// Gaussian blur sigma in pixels (0 disables blurring).
    pub blur_sigma: f64,
    /// Min-max stretch the blurred map to [0,1].
    pub contrast_stretch: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // "warm = bright" heat proxy: red-heavy luminance, mild blur
        Self {
            luminance_weights: [0.6, 0.3, 0.1],
            blur_sigma: 2.0,
            contrast_stretch: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.luminance_weights.iter().sum();
        if self.luminance_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig("luminance weights must be non-negative".into()));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "luminance weights sum to {sum}, expected 1"
            )));
        }
        if self.blur_sigma < 0.0 {
            return Err(Error::InvalidConfig("blur_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Image-in/image-out translator seam so a learned model can replace the
/// deterministic transform without touching callers.
pub trait TirTranslator {
    /// H×W×3 RGB in [0,1] to H×W×1 TIR in [0,1].
    fn translate(&self, rgb: &Array3<f64>) -> Array3<f64>;
}

impl TirTranslator for SynthConfig {
    fn translate(&self, rgb: &Array3<f64>) -> Array3<f64> {
        pseudo_tir(rgb, self)
    }
}

/// Normalized 1-D Gaussian kernel with radius ceil(2·sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (2.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with replicate borders (constants stay constant).
fn blur(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return map.clone();
    }
    let radius = kernel.len() / 2;
    let (h, w) = map.dim();
    let mut horiz = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sx = (x as isize + i as isize - radius as isize).clamp(0, w as isize - 1);
                acc += kv * map[[y, sx as usize]];
            }
            horiz[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sy = (y as isize + i as isize - radius as isize).clamp(0, h as isize - 1);
                acc += kv * horiz[[sy as usize, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Deterministic pseudo-TIR transform: weighted luminance, Gaussian blur,
/// optional min-max contrast stretch. Values stay in [0,1].
pub fn pseudo_tir(rgb: &Array3<f64>, config: &SynthConfig) -> Array3<f64> {
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    let wts = config.luminance_weights;
    let lum = Array2::from_shape_fn((h, w), |(y, x)| {
        wts[0] * rgb[[y, x, 0]] + wts[1] * rgb[[y, x, 1]] + wts[2] * rgb[[y, x, 2]]
    });
    let mut blurred = blur(&lum, config.blur_sigma);
    if config.contrast_stretch {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in blurred.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > 1e-12 {
            blurred.mapv_inplace(|v| (v - lo) / (hi - lo));
        }
    }
    Array3::from_shape_fn((h, w, 1), |(y, x, _)| blurred[[y, x]].clamp(0.0, 1.0))
}

/// Mirror an RGB-only dataset into an aligned RGB-T dataset: color images and
/// annotation files are copied byte-for-byte, ir/ is synthesized via the
/// translator. Sequences named in `exclusions` are skipped. Returns the
/// number of sequences written.
pub fn build_paired_dataset(
    rgb_root: &Path,
    out_root: &Path,
    config: &SynthConfig,
    exclusions: &BTreeSet<String>,
) -> Result<usize> {
    config.validate()?;
    build_paired_dataset_with(rgb_root, out_root, config, exclusions)
}

/// Same as [`build_paired_dataset`] with an arbitrary translator.
pub fn build_paired_dataset_with(
    rgb_root: &Path,
    out_root: &Path,
    translator: &dyn TirTranslator,
    exclusions: &BTreeSet<String>,
) -> Result<usize> {
    let mut count = 0;
    let mut dirs: Vec<_> = fs::read_dir(rgb_root)
        .map_err(|e| Error::io(rgb_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("groundtruth.txt").exists() && p.join("color").is_dir())
        .collect();
    dirs.sort();
    for seq_dir in dirs {
        let name = seq_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if exclusions.contains(&name) {
            continue;
        }
        let out_dir = out_root.join(&name);
        let out_color = out_dir.join("color");
        let out_ir = out_dir.join("ir");
        fs::create_dir_all(&out_color).map_err(|e| Error::io(&out_color, e))?;
        fs::create_dir_all(&out_ir).map_err(|e| Error::io(&out_ir, e))?;

        let mut images: Vec<_> = fs::read_dir(seq_dir.join("color"))
            .map_err(|e| Error::io(seq_dir.join("color"), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("jpg") | Some("jpeg")
                )
            })
            .collect();
        images.sort();
        for img_path in &images {
            let fname = img_path.file_name().unwrap();
            fs::copy(img_path, out_color.join(fname))
                .map_err(|e| Error::io(img_path, e))?;
            let rgb = load_rgb_array(img_path)?;
            let tir = translator.translate(&rgb);
            save_gray_png(&out_ir.join(Path::new(fname).with_extension("png")), &tir)?;
        }
        for annot in ["groundtruth.txt", "attributes.txt"] {
            let src = seq_dir.join(annot);
            if src.exists() {
                fs::copy(&src, out_dir.join(annot)).map_err(|e| Error::io(&src, e))?;
            }
        }
        count += 1;
    }
    Ok(count)
}

fn load_rgb_array(path: &Path) -> Result<Array3<f64>> {
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

fn save_gray_png(path: &Path, arr: &Array3<f64>) -> Result<()> {
    let (h, w) = (arr.shape()[0], arr.shape()[1]);
    let buf: Vec<u8> = (0..h * w)
        .map(|i| (arr[[i / w, i % w, 0]].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::L8).map_err(|e| {
        Error::Image {
            path: path.into(),
            message: e.to_string(),
        }
    })
}

/// Inclusive frame interval used by corruption schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrameInterval {
    pub from: usize,
    pub to: usize,
}

impl FrameInterval {
    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.from && frame <= self.to
    }
}

/// Linear motion plus per-frame uniform jitter.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MotionModel {
    pub velocity: (f64, f64),
    pub jitter: f64,
}

/// Everything needed to synthesize one toy sequence deterministically.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ToySequenceSpec {
    pub num_frames: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub target_size_range: (f64, f64),
    pub motion: MotionModel,
    /// Top-left of the target in frame 0; drawn to fit when absent.
    pub start: Option<(f64, f64)>,
    pub rgb_corruption: Vec<FrameInterval>,
    pub tir_corruption: Vec<FrameInterval>,
    pub seed: u64,
}

/// Smooth per-sequence texture: a coarse random grid upsampled bilinearly.
fn texture(rng: &mut ChaCha12Rng, size: usize, lo: f64, hi: f64) -> Array2<f64> {
    let grid = 6usize;
    let coarse = Array2::from_shape_fn((grid, grid), |_| rng.gen_range(lo..hi));
    let scale = (grid - 1) as f64 / (size - 1) as f64;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let fy = y as f64 * scale;
        let fx = x as f64 * scale;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        coarse[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + coarse[[y0, x1]] * (1.0 - dy) * dx
            + coarse[[y1, x0]] * dy * (1.0 - dx)
            + coarse[[y1, x1]] * dy * dx
    })
}

/// Fraction of the unit pixel cell [px,px+1)×[py,py+1) covered by the box.
fn pixel_coverage(b: &BoundingBox, px: usize, py: usize) -> f64 {
    let ox = (b.right().min(px as f64 + 1.0) - b.x.max(px as f64)).max(0.0);
    let oy = (b.bottom().min(py as f64 + 1.0) - b.y.max(py as f64)).max(0.0);
    ox * oy
}

fn paint_rect(channel: &mut Array2<f64>, b: &BoundingBox, value: f64) {
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = (b.right().ceil() as usize).min(channel.dim().1);
    let y1 = (b.bottom().ceil() as usize).min(channel.dim().0);
    for py in y0..y1 {
        for px in x0..x1 {
            let c = pixel_coverage(b, px, py);
            if c > 0.0 {
                channel[[py, px]] = channel[[py, px]] * (1.0 - c) + value * c;
            }
        }
    }
}

fn corrupt(channel: &mut Array2<f64>, rng: &mut ChaCha12Rng) {
    channel.mapv_inplace(|v| v * 0.15);
    for v in channel.iter_mut() {
        *v = (*v + rng.gen_range(0.0..0.1)).clamp(0.0, 1.0);
    }
}

/// Generate a toy sequence: moving rectangular target on a textured
/// background, with the scheduled modality corrupted (darkened and noised)
/// while the other stays clean. Ground truth is exact by construction.
pub fn generate_toy_sequence(spec: &ToySequenceSpec) -> Result<Sequence> {
    if spec.num_frames < 2 {
        return Err(Error::InvalidConfig("num_frames must be >= 2".into()));
    }
    if spec.target_size_range.0 <= 0.0 || spec.target_size_range.1 < spec.target_size_range.0 {
        return Err(Error::InvalidConfig("bad target_size_range".into()));
    }
    let size = spec.image_size;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    let target_w = rng.gen_range(spec.target_size_range.0..=spec.target_size_range.1);
    let target_h = rng.gen_range(spec.target_size_range.0..=spec.target_size_range.1);

    // per-frame jitter offsets (frame 0 is exactly the start position)
    let jitters: Vec<(f64, f64)> = (0..spec.num_frames)
        .map(|j| {
            if j == 0 || spec.motion.jitter == 0.0 {
                (0.0, 0.0)
            } else {
                (
                    rng.gen_range(-spec.motion.jitter..=spec.motion.jitter),
                    rng.gen_range(-spec.motion.jitter..=spec.motion.jitter),
                )
            }
        })
        .collect();

    let (vx, vy) = spec.motion.velocity;
    let n = spec.num_frames as f64 - 1.0;
    let start = match spec.start {
        Some(s) => s,
        None => {
            // bound the linear sweep plus jitter, then place the start inside
            let margin = spec.motion.jitter + 1.0;
            let reach_x = vx * n;
            let reach_y = vy * n;
            let lo_x = margin - reach_x.min(0.0);
            let hi_x = size as f64 - target_w - margin - reach_x.max(0.0);
            let lo_y = margin - reach_y.min(0.0);
            let hi_y = size as f64 - target_h - margin - reach_y.max(0.0);
            if hi_x <= lo_x || hi_y <= lo_y {
                return Err(Error::InvalidConfig(
                    "toy target cannot stay inside image bounds for this motion".into(),
                ));
            }
            (rng.gen_range(lo_x..hi_x), rng.gen_range(lo_y..hi_y))
        }
    };

    let mut groundtruth = Vec::with_capacity(spec.num_frames);
    for j in 0..spec.num_frames {
        let x = start.0 + vx * j as f64 + jitters[j].0;
        let y = start.1 + vy * j as f64 + jitters[j].1;
        let b = BoundingBox::new(x, y, target_w, target_h)?;
        if !b.inside(size, size) {
            return Err(Error::InvalidConfig(format!(
                "toy target leaves image bounds at frame {j}"
            )));
        }
        groundtruth.push(b);
    }

    // static per-sequence backgrounds and target appearance
    let bg_rgb: Vec<Array2<f64>> = (0..3).map(|_| texture(&mut rng, size, 0.25, 0.65)).collect();
    let bg_tir = texture(&mut rng, size, 0.15, 0.45);
    let dominant = rng.gen_range(0..3usize);
    let target_rgb: Vec<f64> = (0..3)
        .map(|c| {
            if c == dominant {
                rng.gen_range(0.8..1.0)
            } else {
                rng.gen_range(0.0..0.25)
            }
        })
        .collect();
    let target_tir = rng.gen_range(0.85..0.95);

    let mut frames = Vec::with_capacity(spec.num_frames);
    for (j, b) in groundtruth.iter().enumerate() {
        let mut rgb_ch: Vec<Array2<f64>> = bg_rgb.clone();
        for (c, ch) in rgb_ch.iter_mut().enumerate() {
            paint_rect(ch, b, target_rgb[c]);
        }
        let mut tir_ch = bg_tir.clone();
        paint_rect(&mut tir_ch, b, target_tir);

        if spec.rgb_corruption.iter().any(|iv| iv.contains(j)) {
            for ch in rgb_ch.iter_mut() {
                corrupt(ch, &mut rng);
            }
        }
        if spec.tir_corruption.iter().any(|iv| iv.contains(j)) {
            corrupt(&mut tir_ch, &mut rng);
        }

        let rgb = Array3::from_shape_fn((size, size, 3), |(y, x, c)| rgb_ch[c][[y, x]]);
        let tir = Array3::from_shape_fn((size, size, 1), |(y, x, _)| tir_ch[[y, x]]);
        frames.push(FramePair::new(rgb, tir, j)?);
    }

    let mut attributes = BTreeSet::new();
    if !spec.rgb_corruption.is_empty() {
        attributes.insert("low_illumination".to_string());
    }
    if !spec.tir_corruption.is_empty() {
        attributes.insert("thermal_crossover".to_string());
    }

    Sequence::new(
        format!("toy{:06}", spec.seed),
        frames,
        groundtruth,
        attributes,
    )
}

/// Batch parameters for a toy dataset with complementary corruption: every
/// sequence carries one RGB-corrupted window and one disjoint TIR-corrupted
/// window, so neither single modality survives the whole video.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetSpec {
    pub sequences: usize,
    pub num_frames: usize,
    pub image_size: usize,
    pub target_size_range: (f64, f64),
    pub max_speed: f64,
    pub jitter: f64,
    pub corruption: bool,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            sequences: 8,
            num_frames: 30,
            image_size: 96,
            target_size_range: (12.0, 18.0),
            max_speed: 1.5,
            jitter: 0.3,
            corruption: true,
            seed: 0,
        }
    }
}

/// Derive the per-sequence spec for index `i` of a dataset spec.
pub fn toy_sequence_spec(ds: &ToyDatasetSpec, i: usize) -> ToySequenceSpec {
    let mut rng = ChaCha12Rng::seed_from_u64(ds.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(0.4..ds.max_speed);
    let n = ds.num_frames;
    let (rgb_corruption, tir_corruption) = if ds.corruption {
        (
            vec![FrameInterval { from: n / 5, to: 2 * n / 5 }],
            vec![FrameInterval { from: 3 * n / 5, to: 4 * n / 5 }],
        )
    } else {
        (Vec::new(), Vec::new())
    };
    ToySequenceSpec {
        num_frames: n,
        image_size: ds.image_size,
        target_size_range: ds.target_size_range,
        motion: MotionModel {
            velocity: (speed * angle.cos(), speed * angle.sin()),
            jitter: ds.jitter,
        },
        start: None,
        rgb_corruption,
        tir_corruption,
        seed: rng.gen(),
    }
}

/// Generate and write a toy dataset under `root`. Returns sequence names.
pub fn write_toy_dataset(ds: &ToyDatasetSpec, root: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for i in 0..ds.sequences {
        let spec = toy_sequence_spec(ds, i);
        let mut seq = generate_toy_sequence(&spec)?;
        seq.name = format!("toy{i:04}");
        let dir = root.join(&seq.name);
        data_model::write_sequence(&seq, &dir)?;
        names.push(seq.name);
    }
    Ok(names)
}
