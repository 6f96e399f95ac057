//! The three fusion mechanisms and the component-wise routing grid.
//!
//! Each mechanism (single-modality, pixel-, feature-, response-level) is a
//! strategy behind the [`FusionMechanism`] trait, selected at runtime from a
//! [`FusionConfig`] or by ablation row name. Routing decides which input
//! (rgb | tir | fused) the IoU head and the model predictor each receive;
//! feature fusion is channel concatenation (RGB block first), response
//! fusion is plain elementwise summation.

use ndarray::ArrayD;

use crate::autodiff::{Tape, Var};
use crate::backbone::{FeatureBundle, Modality};
use crate::error::{Error, Result};

/// Where modalities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionLevel {
    SingleRgb,
    SingleTir,
    Pixel,
    Feature,
    Response,
}

impl std::fmt::Display for FusionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionLevel::SingleRgb => "single_rgb",
            FusionLevel::SingleTir => "single_tir",
            FusionLevel::Pixel => "pixel",
            FusionLevel::Feature => "feature",
            FusionLevel::Response => "response",
        };
        f.write_str(s)
    }
}

/// Which fusion level is active and which input each component receives.
///
/// For `Response` level the predictor field is fixed to `Fused`, read as
/// "both modalities, responses summed"; the IoU head still consumes a single
/// modality there.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub level: FusionLevel,
    pub iou_input: Modality,
    pub predictor_input: Modality,
    /// Learning-rate multiplier for the TIR feature extractor (1 or 10).
    #[serde(default = "default_multiplier")]
    pub tir_lr_multiplier: f64,
}

fn default_multiplier() -> f64 {
    1.0
}

impl FusionConfig {
    pub fn single_rgb() -> Self {
        Self {
            level: FusionLevel::SingleRgb,
            iou_input: Modality::Rgb,
            predictor_input: Modality::Rgb,
            tir_lr_multiplier: 1.0,
        }
    }

    pub fn single_tir() -> Self {
        Self {
            level: FusionLevel::SingleTir,
            iou_input: Modality::Tir,
            predictor_input: Modality::Tir,
            tir_lr_multiplier: 1.0,
        }
    }

    pub fn pixel() -> Self {
        Self {
            level: FusionLevel::Pixel,
            iou_input: Modality::Fused,
            predictor_input: Modality::Fused,
            tir_lr_multiplier: 1.0,
        }
    }

    pub fn feature(iou_input: Modality, predictor_input: Modality) -> Self {
        Self {
            level: FusionLevel::Feature,
            iou_input,
            predictor_input,
            tir_lr_multiplier: 1.0,
        }
    }

    pub fn response(iou_input: Modality) -> Self {
        Self {
            level: FusionLevel::Response,
            iou_input,
            predictor_input: Modality::Fused,
            tir_lr_multiplier: 1.0,
        }
    }

    pub fn with_tir_multiplier(mut self, m: f64) -> Self {
        self.tir_lr_multiplier = m;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tir_lr_multiplier <= 0.0 {
            return Err(Error::InvalidConfig("tir_lr_multiplier must be positive".into()));
        }
        let ok = match self.level {
            FusionLevel::SingleRgb => {
                self.iou_input == Modality::Rgb && self.predictor_input == Modality::Rgb
            }
            FusionLevel::SingleTir => {
                self.iou_input == Modality::Tir && self.predictor_input == Modality::Tir
            }
            FusionLevel::Pixel => {
                self.iou_input == Modality::Fused && self.predictor_input == Modality::Fused
            }
            FusionLevel::Feature => true,
            FusionLevel::Response => {
                matches!(self.iou_input, Modality::Rgb | Modality::Tir)
                    && self.predictor_input == Modality::Fused
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid routing for {}: iou={}, predictor={}",
                self.level, self.iou_input, self.predictor_input
            )))
        }
    }

    /// Raw input streams this configuration requires.
    pub fn required_modalities(&self) -> &'static [Modality] {
        match self.level {
            FusionLevel::SingleRgb => &[Modality::Rgb],
            FusionLevel::SingleTir => &[Modality::Tir],
            FusionLevel::Pixel => &[Modality::Fused],
            FusionLevel::Feature | FusionLevel::Response => &[Modality::Rgb, Modality::Tir],
        }
    }
}

/// Channel concatenation of per-modality features, RGB block first.
pub fn fuse_features(tape: &mut Tape, x_v: Var, x_t: Var) -> Result<Var> {
    let a = tape.value(x_v).shape().to_vec();
    let b = tape.value(x_t).shape().to_vec();
    if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
        return Err(Error::ShapeMismatch(format!(
            "fuse_features: spatial sizes differ ({a:?} vs {b:?})"
        )));
    }
    Ok(tape.concat_c(&[x_v, x_t]))
}

/// Elementwise sum of per-modality response maps.
pub fn fuse_response(tape: &mut Tape, s_v: Var, s_t: Var) -> Result<Var> {
    if tape.value(s_v).shape() != tape.value(s_t).shape() {
        return Err(Error::ShapeMismatch(format!(
            "fuse_response: shapes differ ({:?} vs {:?})",
            tape.value(s_v).shape(),
            tape.value(s_t).shape()
        )));
    }
    Ok(tape.add(s_v, s_t))
}

/// Row-major argmax with smallest-index tie-breaking.
pub fn argmax2(map: &ArrayD<f64>) -> (usize, usize) {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let s = map.as_slice().expect("contiguous");
    let mut best = 0usize;
    for (i, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = i;
        }
    }
    let _ = h;
    (best / w, best % w)
}

/// Per-modality feature bundles available to the router.
#[derive(Debug, Default, Clone)]
pub struct RoutedBundles {
    pub rgb: Option<FeatureBundle>,
    pub tir: Option<FeatureBundle>,
    pub fused: Option<FeatureBundle>,
}

impl RoutedBundles {
    fn get(&self, m: Modality) -> Result<&FeatureBundle> {
        let b = match m {
            Modality::Rgb => &self.rgb,
            Modality::Tir => &self.tir,
            Modality::Fused => &self.fused,
        };
        b.as_ref()
            .ok_or_else(|| Error::ShapeMismatch(format!("missing {m} feature bundle")))
    }
}

/// Features handed to the IoU head: both taps, with their strides.
#[derive(Debug, Clone, Copy)]
pub struct IouFeatures {
    pub block3: Var,
    pub block4: Var,
    pub stride3: usize,
    pub stride4: usize,
}

/// Features handed to the model predictor (block4 only).
#[derive(Debug, Clone)]
pub enum PredictorFeatures {
    /// One filter on one (possibly channel-fused) feature map.
    Single { block4: Var, stride4: usize },
    /// Independent per-modality predictors; responses are summed.
    PerModality {
        rgb_block4: Var,
        tir_block4: Var,
        stride4: usize,
    },
}

#[derive(Debug, Clone)]
pub struct RoutedInputs {
    pub iou: IouFeatures,
    pub predictor: PredictorFeatures,
}

fn single_bundle_inputs(bundle: &FeatureBundle) -> RoutedInputs {
    RoutedInputs {
        iou: IouFeatures {
            block3: bundle.block3,
            block4: bundle.block4,
            stride3: bundle.stride3,
            stride4: bundle.stride4,
        },
        predictor: PredictorFeatures::Single {
            block4: bundle.block4,
            stride4: bundle.stride4,
        },
    }
}

/// Resolve the exact feature set each component consumes under a config.
pub fn route_inputs(
    tape: &mut Tape,
    config: &FusionConfig,
    bundles: &RoutedBundles,
) -> Result<RoutedInputs> {
    config.validate()?;
    mechanism(config).route(tape, bundles)
}

/// One interchangeable fusion strategy. Implementations route features and
/// combine per-modality responses.
pub trait FusionMechanism {
    fn config(&self) -> &FusionConfig;

    /// Which component gets which features.
    fn route(&self, tape: &mut Tape, bundles: &RoutedBundles) -> Result<RoutedInputs>;

    /// Combine per-modality response maps (identity for single-response
    /// mechanisms, elementwise sum for response-level fusion).
    fn fuse_responses(&self, tape: &mut Tape, responses: &[Var]) -> Result<Var> {
        match responses {
            [only] => Ok(*only),
            [first, rest @ ..] => {
                let mut acc = *first;
                for r in rest {
                    acc = fuse_response(tape, acc, *r)?;
                }
                Ok(acc)
            }
            [] => Err(Error::ShapeMismatch("no responses to fuse".into())),
        }
    }
}

struct SingleModality {
    config: FusionConfig,
    modality: Modality,
}

impl FusionMechanism for SingleModality {
    fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn route(&self, _tape: &mut Tape, bundles: &RoutedBundles) -> Result<RoutedInputs> {
        Ok(single_bundle_inputs(bundles.get(self.modality)?))
    }
}

struct PixelLevel {
    config: FusionConfig,
}

impl FusionMechanism for PixelLevel {
    fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn route(&self, _tape: &mut Tape, bundles: &RoutedBundles) -> Result<RoutedInputs> {
        // a single 4-channel extractor produced the bundle
        Ok(single_bundle_inputs(bundles.get(Modality::Fused)?))
    }
}

struct FeatureLevel {
    config: FusionConfig,
}

impl FusionMechanism for FeatureLevel {
    fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn route(&self, tape: &mut Tape, bundles: &RoutedBundles) -> Result<RoutedInputs> {
        let iou = match self.config.iou_input {
            Modality::Fused => {
                let r = bundles.get(Modality::Rgb)?;
                let t = bundles.get(Modality::Tir)?;
                // the IoU head consumes both taps, so both are fused
                let block3 = fuse_features(tape, r.block3, t.block3)?;
                let block4 = fuse_features(tape, r.block4, t.block4)?;
                IouFeatures {
                    block3,
                    block4,
                    stride3: r.stride3,
                    stride4: r.stride4,
                }
            }
            m => {
                let b = bundles.get(m)?;
                IouFeatures {
                    block3: b.block3,
                    block4: b.block4,
                    stride3: b.stride3,
                    stride4: b.stride4,
                }
            }
        };
        let predictor = match self.config.predictor_input {
            Modality::Fused => {
                let r = bundles.get(Modality::Rgb)?;
                let t = bundles.get(Modality::Tir)?;
                // the predictor consumes only block4
                let block4 = fuse_features(tape, r.block4, t.block4)?;
                PredictorFeatures::Single {
                    block4,
                    stride4: r.stride4,
                }
            }
            m => {
                let b = bundles.get(m)?;
                PredictorFeatures::Single {
                    block4: b.block4,
                    stride4: b.stride4,
                }
            }
        };
        Ok(RoutedInputs { iou, predictor })
    }
}

struct ResponseLevel {
    config: FusionConfig,
}

impl FusionMechanism for ResponseLevel {
    fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn route(&self, _tape: &mut Tape, bundles: &RoutedBundles) -> Result<RoutedInputs> {
        let rgb = bundles.get(Modality::Rgb)?;
        let tir = bundles.get(Modality::Tir)?;
        let iou_bundle = bundles.get(self.config.iou_input)?;
        Ok(RoutedInputs {
            iou: IouFeatures {
                block3: iou_bundle.block3,
                block4: iou_bundle.block4,
                stride3: iou_bundle.stride3,
                stride4: iou_bundle.stride4,
            },
            predictor: PredictorFeatures::PerModality {
                rgb_block4: rgb.block4,
                tir_block4: tir.block4,
                stride4: rgb.stride4,
            },
        })
    }
}

/// Strategy object for a validated config.
pub fn mechanism(config: &FusionConfig) -> Box<dyn FusionMechanism> {
    match config.level {
        FusionLevel::SingleRgb => Box::new(SingleModality {
            config: config.clone(),
            modality: Modality::Rgb,
        }),
        FusionLevel::SingleTir => Box::new(SingleModality {
            config: config.clone(),
            modality: Modality::Tir,
        }),
        FusionLevel::Pixel => Box::new(PixelLevel { config: config.clone() }),
        FusionLevel::Feature => Box::new(FeatureLevel { config: config.clone() }),
        FusionLevel::Response => Box::new(ResponseLevel { config: config.clone() }),
    }
}

/// Which parameter groups a fine-tuning stage is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FinetuneFlags {
    pub backbone: bool,
    pub iou: bool,
    pub predictor: bool,
}

impl FinetuneFlags {
    pub const ALL: FinetuneFlags = FinetuneFlags {
        backbone: true,
        iou: true,
        predictor: true,
    };
    pub const NONE: FinetuneFlags = FinetuneFlags {
        backbone: false,
        iou: false,
        predictor: false,
    };
}

/// One named ablation configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub fusion: FusionConfig,
    pub finetune: FinetuneFlags,
}

fn row(name: &str, fusion: FusionConfig, finetune: FinetuneFlags) -> AblationRow {
    AblationRow {
        name: name.to_string(),
        fusion,
        finetune,
    }
}

/// The full named configuration grid: 6 single-modality rows plus 12 fusion
/// rows (pixel, 2 response, and the 3×3 feature-level routing grid).
pub fn table1_rows() -> Vec<AblationRow> {
    let ft = FinetuneFlags::ALL;
    let mut rows = vec![
        row("single_rgb", FusionConfig::single_rgb(), FinetuneFlags::NONE),
        row("single_tir", FusionConfig::single_tir(), FinetuneFlags::NONE),
        row(
            "single_tir/ft=iou+pred",
            FusionConfig::single_tir(),
            FinetuneFlags { backbone: false, iou: true, predictor: true },
        ),
        row(
            "single_tir/ft=backbone+pred",
            FusionConfig::single_tir(),
            FinetuneFlags { backbone: true, iou: false, predictor: true },
        ),
        row("single_tir/ft=all", FusionConfig::single_tir(), ft),
        row("single_rgb/ft=all", FusionConfig::single_rgb(), ft),
        row("pixel", FusionConfig::pixel(), ft),
        row("response/iou=rgb", FusionConfig::response(Modality::Rgb), ft),
        row("response/iou=tir", FusionConfig::response(Modality::Tir), ft),
    ];
    for iou in [Modality::Rgb, Modality::Tir, Modality::Fused] {
        for pred in [Modality::Rgb, Modality::Tir, Modality::Fused] {
            rows.push(row(
                &format!("feature/iou={iou}/pred={pred}"),
                FusionConfig::feature(iou, pred),
                ft,
            ));
        }
    }
    rows
}

/// Resolve a row by name. A `/tirx10` suffix selects the ×10 TIR-extractor
/// learning-rate variant of any row (the headline configuration is
/// `feature/iou=fused/pred=fused/tirx10`).
pub fn parse_row(name: &str) -> Result<AblationRow> {
    let (base, tirx10) = match name.strip_suffix("/tirx10") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let mut found = table1_rows()
        .into_iter()
        .find(|r| r.name == base)
        .ok_or_else(|| Error::UnknownRow(name.to_string()))?;
    if tirx10 {
        found.fusion = found.fusion.with_tir_multiplier(10.0);
        found.name = format!("{}/tirx10", found.name);
    }
    Ok(found)
}
