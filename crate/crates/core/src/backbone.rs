//! Multi-stage convolutional feature extractor with block3/block4 taps.
//!
//! Four stages of (conv, per-channel affine, leaky ReLU, optional stride-2
//! average pool). The first layer is 7×7 so the pixel-fusion variant can
//! extend its kernels from 3 to 4 input channels; later stages are 3×3.
//! block3 is the output of stage 3, block4 of stage 4.

use ndarray::{Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Which stream a feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Tir,
    Fused,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Modality::Rgb => "rgb",
            Modality::Tir => "tir",
            Modality::Fused => "fused",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// 3 (RGB), 1 (TIR) or 4 (pixel-fused RGB-T).
    pub input_channels: usize,
    pub widths: [usize; 4],
    /// Per-stage downsampling factor, each 1 or 2.
    pub strides: [usize; 4],
    pub weight_init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            widths: [16, 32, 64, 64],
            strides: [2, 2, 2, 2],
            weight_init_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 3, 4].contains(&self.input_channels) {
            return Err(Error::InvalidConfig(format!(
                "input_channels must be 1, 3 or 4, got {}",
                self.input_channels
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("backbone widths must be positive".into()));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::InvalidConfig("backbone strides must be 1 or 2".into()));
        }
        Ok(())
    }

    /// Image pixels per feature cell at the block3 tap.
    pub fn stride3(&self) -> usize {
        self.strides[..3].iter().product()
    }

    /// Image pixels per feature cell at the block4 tap.
    pub fn stride4(&self) -> usize {
        self.strides.iter().product()
    }

    /// Channel count of the block3 tap.
    pub fn channels3(&self) -> usize {
        self.widths[2]
    }

    /// Channel count of the block4 tap.
    pub fn channels4(&self) -> usize {
        self.widths[3]
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// Cout×Cin×k×k
    pub weight: ArrayD<f64>,
    /// Cout
    pub bias: ArrayD<f64>,
}

impl ConvLayer {
    pub fn init(rng: &mut ChaCha12Rng, cout: usize, cin: usize, k: usize) -> Self {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let weight = ArrayD::from_shape_fn(IxDyn(&[cout, cin, k, k]), |_| normal.sample(rng));
        Self {
            weight,
            bias: ArrayD::zeros(IxDyn(&[cout])),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub conv: ConvLayer,
    /// Per-channel affine normalization (learned gain and bias).
    pub gain: ArrayD<f64>,
    pub shift: ArrayD<f64>,
    pub pool: bool,
}

/// Learned weights of one extractor instance.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
}

impl BackboneParams {
    pub fn init(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.weight_init_seed);
        let mut cin = config.input_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, &cout) in config.widths.iter().enumerate() {
            let k = if i == 0 { 7 } else { 3 };
            stages.push(Stage {
                conv: ConvLayer::init(&mut rng, cout, cin, k),
                gain: ArrayD::from_elem(IxDyn(&[cout]), 1.0),
                shift: ArrayD::zeros(IxDyn(&[cout])),
                pool: config.strides[i] == 2,
            });
            cin = cout;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    /// Visit every parameter tensor with a stable name, in a stable order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a ArrayD<f64>)) {
        for (i, s) in self.stages.iter().enumerate() {
            f(format!("stage{}/conv/weight", i + 1), &s.conv.weight);
            f(format!("stage{}/conv/bias", i + 1), &s.conv.bias);
            f(format!("stage{}/norm/gain", i + 1), &s.gain);
            f(format!("stage{}/norm/shift", i + 1), &s.shift);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut ArrayD<f64>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(format!("stage{}/conv/weight", i + 1), &mut s.conv.weight);
            f(format!("stage{}/conv/bias", i + 1), &mut s.conv.bias);
            f(format!("stage{}/norm/gain", i + 1), &mut s.gain);
            f(format!("stage{}/norm/shift", i + 1), &mut s.shift);
        }
    }

    /// First-layer pre-activation (conv + bias only), for probes and the
    /// channel-extension contract.
    pub fn first_layer_preactivation(&self, image_chw: &ArrayD<f64>) -> ArrayD<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(image_chw.clone());
        let w = tape.constant(self.stages[0].conv.weight.clone());
        let b = tape.constant(self.stages[0].conv.bias.clone());
        let pad = self.stages[0].conv.kernel() / 2;
        let y = tape.conv2d(x, w, Some(b), pad);
        tape.value(y).clone()
    }
}

/// Per-block dense feature maps on a tape, tagged with modality and stride.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBundle {
    pub block3: Var,
    pub block4: Var,
    pub stride3: usize,
    pub stride4: usize,
    pub modality: Modality,
}

/// Leaky-ReLU slope shared by every stage.
pub const RELU_SLOPE: f64 = 0.1;

/// Run the extractor on an image node (C×H×W) already on the tape.
/// Deterministic given parameters; differentiable with respect to both.
pub fn extract_features(
    tape: &mut Tape,
    image: Var,
    params: &BackboneParams,
    modality: Modality,
) -> Result<FeatureBundle> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != params.config.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "backbone expects {}×H×W input, got {:?}",
            params.config.input_channels, shape
        )));
    }
    let (mut h, mut w) = (shape[1], shape[2]);
    let mut x = image;
    let mut block3 = None;
    for (i, stage) in params.stages.iter().enumerate() {
        let wv = tape.constant(stage.conv.weight.clone());
        let bv = tape.constant(stage.conv.bias.clone());
        let pad = stage.conv.kernel() / 2;
        let conv = tape.conv2d(x, wv, Some(bv), pad);
        let g = tape.constant(stage.gain.clone());
        let s = tape.constant(stage.shift.clone());
        let norm = tape.channel_affine(conv, g, s);
        let act = tape.leaky_relu(norm, RELU_SLOPE);
        x = if stage.pool {
            h /= 2;
            w /= 2;
            tape.avg_pool2(act)
        } else {
            act
        };
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input too small: stage {} output is {h}×{w}",
                i + 1
            )));
        }
        if i == 2 {
            block3 = Some(x);
        }
    }
    Ok(FeatureBundle {
        block3: block3.expect("4 stages"),
        block4: x,
        stride3: params.config.stride3(),
        stride4: params.config.stride4(),
        modality,
    })
}

/// Variant of [`extract_features`] that inserts the parameters as
/// differentiable leaves and reports their tape handles, for training.
pub fn extract_features_trainable(
    tape: &mut Tape,
    image: Var,
    params: &BackboneParams,
    modality: Modality,
    mut on_param: impl FnMut(String, Var),
) -> Result<FeatureBundle> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 || shape[0] != params.config.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "backbone expects {}×H×W input, got {:?}",
            params.config.input_channels, shape
        )));
    }
    let (mut h, mut w) = (shape[1], shape[2]);
    let mut x = image;
    let mut block3 = None;
    for (i, stage) in params.stages.iter().enumerate() {
        let wv = tape.leaf(stage.conv.weight.clone());
        let bv = tape.leaf(stage.conv.bias.clone());
        on_param(format!("stage{}/conv/weight", i + 1), wv);
        on_param(format!("stage{}/conv/bias", i + 1), bv);
        let pad = stage.conv.kernel() / 2;
        let conv = tape.conv2d(x, wv, Some(bv), pad);
        let g = tape.leaf(stage.gain.clone());
        let s = tape.leaf(stage.shift.clone());
        on_param(format!("stage{}/norm/gain", i + 1), g);
        on_param(format!("stage{}/norm/shift", i + 1), s);
        let norm = tape.channel_affine(conv, g, s);
        let act = tape.leaky_relu(norm, RELU_SLOPE);
        x = if stage.pool {
            h /= 2;
            w /= 2;
            tape.avg_pool2(act)
        } else {
            act
        };
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input too small: stage {} output is {h}×{w}",
                i + 1
            )));
        }
        if i == 2 {
            block3 = Some(x);
        }
    }
    Ok(FeatureBundle {
        block3: block3.expect("4 stages"),
        block4: x,
        stride3: params.config.stride3(),
        stride4: params.config.stride4(),
        modality,
    })
}

/// Concatenate RGB and TIR images along channels, RGB first (H×W×4).
pub fn make_pixel_fused_input(rgb: &Array3<f64>, tir: &Array3<f64>) -> Result<Array3<f64>> {
    if rgb.shape()[0] != tir.shape()[0] || rgb.shape()[1] != tir.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "rgb {:?} and tir {:?} differ spatially",
            rgb.shape(),
            tir.shape()
        )));
    }
    if rgb.shape()[2] != 3 || tir.shape()[2] != 1 {
        return Err(Error::ShapeMismatch("expected H×W×3 rgb and H×W×1 tir".into()));
    }
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    Ok(Array3::from_shape_fn((h, w, 4), |(y, x, c)| {
        if c < 3 {
            rgb[[y, x, c]]
        } else {
            tir[[y, x, 0]]
        }
    }))
}

/// HWC image to the CHW layout the tape ops use.
pub fn image_to_chw(img: &Array3<f64>) -> ArrayD<f64> {
    let (h, w, c) = img.dim();
    ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| img[[ix[1], ix[2], ix[0]]])
}

/// How the fourth input slice of the first layer is filled when extending
/// pretrained 3-channel kernels to 4 channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourthSliceInit {
    /// Zero: the 4-channel network reproduces the 3-channel pre-activation.
    Zero,
    /// Mean of the three RGB slices.
    MeanRgb,
}

/// Extend a 3-channel first layer to 4 channels; every other layer is copied
/// unchanged.
pub fn extend_first_layer(params: &BackboneParams, rule: FourthSliceInit) -> Result<BackboneParams> {
    if params.config.input_channels != 3 {
        return Err(Error::InvalidConfig(format!(
            "extend_first_layer needs 3-channel params, got {}",
            params.config.input_channels
        )));
    }
    let mut out = params.clone();
    out.config.input_channels = 4;
    let old = &params.stages[0].conv.weight;
    let (cout, k) = (old.shape()[0], old.shape()[2]);
    let mut new_w = ArrayD::zeros(IxDyn(&[cout, 4, k, k]));
    for oc in 0..cout {
        for ky in 0..k {
            for kx in 0..k {
                let (r, g, b) = (
                    old[[oc, 0, ky, kx]],
                    old[[oc, 1, ky, kx]],
                    old[[oc, 2, ky, kx]],
                );
                new_w[[oc, 0, ky, kx]] = r;
                new_w[[oc, 1, ky, kx]] = g;
                new_w[[oc, 2, ky, kx]] = b;
                new_w[[oc, 3, ky, kx]] = match rule {
                    FourthSliceInit::Zero => 0.0,
                    FourthSliceInit::MeanRgb => (r + g + b) / 3.0,
                };
            }
        }
    }
    out.stages[0].conv.weight = new_w;
    Ok(out)
}
