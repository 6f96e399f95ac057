//! Assembly of one tracker model under a fusion configuration: which
//! extractor instances exist, the model predictor(s), and the IoU head,
//! with stable parameter naming for checkpoints and per-group learning
//! rates.

use ndarray::ArrayD;

use crate::autodiff::{Tape, Var};
use crate::backbone::{
    self, extract_features, extract_features_trainable, BackboneConfig, BackboneParams, Modality,
};
use crate::data_model::FramePair;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionLevel, RoutedBundles};
use crate::iou_net::{IouHeadConfig, IouHeadParams};
use crate::model_predictor::{PredictorConfig, PredictorParams};

/// Parameter group, the unit at which learning rates apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    BackboneRgb,
    BackboneTir,
    BackboneFused,
    Predictor,
    IouHead,
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ParamGroup::BackboneRgb => "backbone_rgb",
            ParamGroup::BackboneTir => "backbone_tir",
            ParamGroup::BackboneFused => "backbone_fused",
            ParamGroup::Predictor => "predictor",
            ParamGroup::IouHead => "iou_head",
        };
        f.write_str(s)
    }
}

/// Architecture template shared by every stream (input channel counts are
/// derived per stream from the fusion config).
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub predictor: PredictorConfig,
    pub iou: IouHeadConfig,
}

/// Deterministic per-component seed stream.
pub fn mix_seed(seed: u64, tag: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
        h ^= h >> 29;
    }
    h
}

/// All learned parameters of one tracker variant.
#[derive(Debug, Clone)]
pub struct TrackModel {
    pub fusion: FusionConfig,
    pub config: ModelConfig,
    pub backbone_rgb: Option<BackboneParams>,
    pub backbone_tir: Option<BackboneParams>,
    pub backbone_fused: Option<BackboneParams>,
    /// Primary predictor (RGB-side for response-level fusion).
    pub predictor: PredictorParams,
    /// Independent TIR predictor, response-level fusion only.
    pub predictor_tir: Option<PredictorParams>,
    pub iou_head: IouHeadParams,
}

impl TrackModel {
    pub fn build(config: &ModelConfig, fusion: &FusionConfig, seed: u64) -> Result<Self> {
        fusion.validate()?;
        let bb = |channels: usize, tag: &str| -> Result<BackboneParams> {
            let cfg = BackboneConfig {
                input_channels: channels,
                weight_init_seed: mix_seed(seed, tag),
                ..config.backbone.clone()
            };
            BackboneParams::init(&cfg)
        };
        let needs = fusion.required_modalities();
        let backbone_rgb = if needs.contains(&Modality::Rgb) {
            Some(bb(3, "backbone_rgb")?)
        } else {
            None
        };
        let backbone_tir = if needs.contains(&Modality::Tir) {
            Some(bb(1, "backbone_tir")?)
        } else {
            None
        };
        let backbone_fused = if needs.contains(&Modality::Fused) {
            Some(bb(4, "backbone_fused")?)
        } else {
            None
        };

        let c3 = config.backbone.channels3();
        let c4 = config.backbone.channels4();
        let pred_channels = match (fusion.level, fusion.predictor_input) {
            (FusionLevel::Feature, Modality::Fused) => 2 * c4,
            _ => c4,
        };
        let pred_cfg = |tag: &str| PredictorConfig {
            weight_init_seed: mix_seed(seed, tag),
            ..config.predictor.clone()
        };
        let predictor = PredictorParams::init(&pred_cfg("predictor"), pred_channels)?;
        let predictor_tir = if fusion.level == FusionLevel::Response {
            Some(PredictorParams::init(&pred_cfg("predictor_tir"), c4)?)
        } else {
            None
        };

        let (iou_c3, iou_c4) = match (fusion.level, fusion.iou_input) {
            (FusionLevel::Feature, Modality::Fused) => (2 * c3, 2 * c4),
            _ => (c3, c4),
        };
        let iou_cfg = IouHeadConfig {
            weight_init_seed: mix_seed(seed, "iou_head"),
            ..config.iou.clone()
        };
        let iou_head = IouHeadParams::init(&iou_cfg, iou_c3, iou_c4)?;

        Ok(Self {
            fusion: fusion.clone(),
            config: config.clone(),
            backbone_rgb,
            backbone_tir,
            backbone_fused,
            predictor,
            predictor_tir,
            iou_head,
        })
    }

    /// Visit every parameter with its group and fully qualified name.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(ParamGroup, String, &'a ArrayD<f64>)) {
        if let Some(b) = &self.backbone_rgb {
            b.visit(|n, a| f(ParamGroup::BackboneRgb, format!("backbone_rgb/{n}"), a));
        }
        if let Some(b) = &self.backbone_tir {
            b.visit(|n, a| f(ParamGroup::BackboneTir, format!("backbone_tir/{n}"), a));
        }
        if let Some(b) = &self.backbone_fused {
            b.visit(|n, a| f(ParamGroup::BackboneFused, format!("backbone_fused/{n}"), a));
        }
        self.predictor
            .visit(|n, a| f(ParamGroup::Predictor, format!("predictor/{n}"), a));
        if let Some(p) = &self.predictor_tir {
            p.visit(|n, a| f(ParamGroup::Predictor, format!("predictor_tir/{n}"), a));
        }
        self.iou_head
            .visit(|n, a| f(ParamGroup::IouHead, format!("iou_head/{n}"), a));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(ParamGroup, String, &mut ArrayD<f64>)) {
        if let Some(b) = &mut self.backbone_rgb {
            b.visit_mut(|n, a| f(ParamGroup::BackboneRgb, format!("backbone_rgb/{n}"), a));
        }
        if let Some(b) = &mut self.backbone_tir {
            b.visit_mut(|n, a| f(ParamGroup::BackboneTir, format!("backbone_tir/{n}"), a));
        }
        if let Some(b) = &mut self.backbone_fused {
            b.visit_mut(|n, a| f(ParamGroup::BackboneFused, format!("backbone_fused/{n}"), a));
        }
        self.predictor
            .visit_mut(|n, a| f(ParamGroup::Predictor, format!("predictor/{n}"), a));
        if let Some(p) = &mut self.predictor_tir {
            p.visit_mut(|n, a| f(ParamGroup::Predictor, format!("predictor_tir/{n}"), a));
        }
        self.iou_head
            .visit_mut(|n, a| f(ParamGroup::IouHead, format!("iou_head/{n}"), a));
    }

    /// Copy parameter arrays by name from another model (shapes must match).
    /// Returns the number of parameters copied.
    pub fn adopt_named(&mut self, source: &TrackModel) -> usize {
        let mut src = std::collections::BTreeMap::new();
        source.visit(|_, name, arr| {
            src.insert(name, arr.clone());
        });
        let mut copied = 0;
        self.visit_mut(|_, name, arr| {
            if let Some(s) = src.get(&name) {
                if s.shape() == arr.shape() {
                    *arr = s.clone();
                    copied += 1;
                }
            }
        });
        copied
    }
}

/// How many times each extractor ran (routing contract checks).
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ExtractionCounts {
    pub rgb: usize,
    pub tir: usize,
    pub fused: usize,
}

/// Extract the per-modality bundles this model's fusion config requires,
/// with frozen parameters (tracking path).
pub fn bundles_frozen(
    tape: &mut Tape,
    model: &TrackModel,
    frame_rgb: &ndarray::Array3<f64>,
    frame_tir: &ndarray::Array3<f64>,
    counts: &mut ExtractionCounts,
) -> Result<RoutedBundles> {
    let mut bundles = RoutedBundles::default();
    for m in model.fusion.required_modalities() {
        match m {
            Modality::Rgb => {
                let params = model
                    .backbone_rgb
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("missing rgb backbone".into()))?;
                let img = tape.constant(backbone::image_to_chw(frame_rgb));
                bundles.rgb = Some(extract_features(tape, img, params, Modality::Rgb)?);
                counts.rgb += 1;
            }
            Modality::Tir => {
                let params = model
                    .backbone_tir
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("missing tir backbone".into()))?;
                let img = tape.constant(backbone::image_to_chw(frame_tir));
                bundles.tir = Some(extract_features(tape, img, params, Modality::Tir)?);
                counts.tir += 1;
            }
            Modality::Fused => {
                let params = model
                    .backbone_fused
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("missing fused backbone".into()))?;
                let fused = backbone::make_pixel_fused_input(frame_rgb, frame_tir)?;
                let img = tape.constant(backbone::image_to_chw(&fused));
                bundles.fused = Some(extract_features(tape, img, params, Modality::Fused)?);
                counts.fused += 1;
            }
        }
    }
    Ok(bundles)
}

/// Trainable-leaf registry built during a training forward pass.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    pub entries: Vec<(ParamGroup, String, Var)>,
}

impl ParamRegistry {
    pub fn push(&mut self, group: ParamGroup, name: String, var: Var) {
        self.entries.push((group, name, var));
    }
}

/// Extract bundles with backbone parameters as trainable leaves. Leaves are
/// registered once per (group, name) pair even when a backbone runs on
/// several frames, so gradients accumulate across frames. The caller passes
/// a per-forward cache keyed by group.
pub struct TrainableExtraction<'m> {
    pub model: &'m TrackModel,
    cache: std::collections::BTreeMap<ParamGroup, Vec<Var>>,
}

impl<'m> TrainableExtraction<'m> {
    pub fn new(model: &'m TrackModel) -> Self {
        Self {
            model,
            cache: std::collections::BTreeMap::new(),
        }
    }

    pub fn bundles(
        &mut self,
        tape: &mut Tape,
        frame: &FramePair,
        registry: &mut ParamRegistry,
    ) -> Result<RoutedBundles> {
        let mut bundles = RoutedBundles::default();
        for m in self.model.fusion.required_modalities() {
            let (group, params, chw) = match m {
                Modality::Rgb => (
                    ParamGroup::BackboneRgb,
                    self.model.backbone_rgb.as_ref(),
                    backbone::image_to_chw(&frame.rgb),
                ),
                Modality::Tir => (
                    ParamGroup::BackboneTir,
                    self.model.backbone_tir.as_ref(),
                    backbone::image_to_chw(&frame.tir),
                ),
                Modality::Fused => (
                    ParamGroup::BackboneFused,
                    self.model.backbone_fused.as_ref(),
                    backbone::image_to_chw(&backbone::make_pixel_fused_input(
                        &frame.rgb, &frame.tir,
                    )?),
                ),
            };
            let params =
                params.ok_or_else(|| Error::InvalidConfig(format!("missing {m} backbone")))?;
            let img = tape.constant(chw);

            let bundle = if let Some(vars) = self.cache.get(&group) {
                // reuse existing leaves: rebuild the forward with shared vars
                let mut it = vars.clone().into_iter();
                extract_with_shared_leaves(tape, img, params, *m, &mut it)?
            } else {
                let mut vars = Vec::new();
                let prefix = group.to_string();
                let bundle = extract_features_trainable(tape, img, params, *m, |name, var| {
                    registry.push(group, format!("{prefix}/{name}"), var);
                    vars.push(var);
                })?;
                self.cache.insert(group, vars);
                bundle
            };
            match m {
                Modality::Rgb => bundles.rgb = Some(bundle),
                Modality::Tir => bundles.tir = Some(bundle),
                Modality::Fused => bundles.fused = Some(bundle),
            }
        }
        Ok(bundles)
    }
}

/// Forward pass reusing previously created parameter leaves, so one leaf per
/// parameter accumulates gradients over all frames in an episode.
fn extract_with_shared_leaves(
    tape: &mut Tape,
    image: Var,
    params: &BackboneParams,
    modality: Modality,
    leaves: &mut impl Iterator<Item = Var>,
) -> Result<crate::backbone::FeatureBundle> {
    use crate::backbone::RELU_SLOPE;
    let shape = tape.value(image).shape().to_vec();
    if shape[0] != params.config.input_channels {
        return Err(Error::ShapeMismatch("channel mismatch".into()));
    }
    let (mut h, mut w) = (shape[1], shape[2]);
    let mut x = image;
    let mut block3 = None;
    for (i, stage) in params.stages.iter().enumerate() {
        let wv = leaves.next().expect("cached leaf");
        let bv = leaves.next().expect("cached leaf");
        let gv = leaves.next().expect("cached leaf");
        let sv = leaves.next().expect("cached leaf");
        let pad = stage.conv.kernel() / 2;
        let conv = tape.conv2d(x, wv, Some(bv), pad);
        let norm = tape.channel_affine(conv, gv, sv);
        let act = tape.leaky_relu(norm, RELU_SLOPE);
        x = if stage.pool {
            h /= 2;
            w /= 2;
            tape.avg_pool2(act)
        } else {
            act
        };
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("input too small".into()));
        }
        if i == 2 {
            block3 = Some(x);
        }
    }
    Ok(crate::backbone::FeatureBundle {
        block3: block3.expect("4 stages"),
        block4: x,
        stride3: params.config.stride3(),
        stride4: params.config.stride4(),
        modality,
    })
}
