//! Offline end-to-end training: episode sampling from paired sequences,
//! the joint loss (classification over unrolled filter iterates plus IoU
//! regression), and stochastic gradient descent with momentum under
//! per-component learning rates (base × fine-tune gain × TIR multiplier).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use crate::data_model::{BoundingBox, SampleSet, Sequence};
use crate::error::{Error, Result};
use crate::fusion::{route_inputs, FinetuneFlags, PredictorFeatures, RoutedInputs};
use crate::iou_net::{
    compute_modulation, iou_regression_loss, jitter_proposals, predict_iou_pooled, test_branch,
    IouVars,
};
use crate::model::{mix_seed, ParamGroup, ParamRegistry, TrackModel, TrainableExtraction};
use crate::model_predictor::{
    classification_loss_from_responses, compute_response, gaussian_label, init_filter,
    optimize_filter, LabelConfig, PredictorVars, TrainSample, TrainSamples,
};
use crate::tracker::crop_search_region;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Frames drawn from each half of a sequence per episode.
    pub n_frames: usize,
    /// Episodes per gradient step.
    pub batch_size: usize,
    pub steps: u64,
    /// Base learning rates per component.
    pub lr_backbone_rgb: f64,
    pub lr_backbone_tir: f64,
    pub lr_predictor: f64,
    pub lr_iou_head: f64,
    /// Global gain multiplying every base rate (0.001 when fine-tuning).
    pub finetune_gain: f64,
    /// Weight of the IoU regression loss.
    pub beta: f64,
    pub momentum: f64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Training-crop geometry (mirrors the tracker's search region).
    pub crop_scale: f64,
    pub crop_size: usize,
    /// Uniform crop-center jitter as a fraction of the crop side.
    pub center_jitter: f64,
    pub proposals_per_frame: usize,
    pub proposal_sigma_center: f64,
    pub proposal_sigma_logscale: f64,
    /// Which parameter groups may move (frozen groups get rate 0).
    pub finetune: FinetuneFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_frames: 3,
            batch_size: 2,
            steps: 1000,
            lr_backbone_rgb: 0.01,
            lr_backbone_tir: 0.01,
            lr_predictor: 0.01,
            lr_iou_head: 0.01,
            finetune_gain: 0.001,
            beta: 1.0,
            momentum: 0.9,
            grad_clip: 5.0,
            seed: 0,
            checkpoint_every: 200,
            crop_scale: 5.0,
            crop_size: 288,
            center_jitter: 0.1,
            proposals_per_frame: 16,
            proposal_sigma_center: 0.15,
            proposal_sigma_logscale: 0.15,
            finetune: FinetuneFlags::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("n_frames and batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr_backbone_rgb", self.lr_backbone_rgb),
            ("lr_backbone_tir", self.lr_backbone_tir),
            ("lr_predictor", self.lr_predictor),
            ("lr_iou_head", self.lr_iou_head),
            ("finetune_gain", self.finetune_gain),
        ] {
            if v <= 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidConfig("beta must be >= 0".into()));
        }
        Ok(())
    }

    fn base_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::BackboneRgb | ParamGroup::BackboneFused => self.lr_backbone_rgb,
            ParamGroup::BackboneTir => self.lr_backbone_tir,
            ParamGroup::Predictor => self.lr_predictor,
            ParamGroup::IouHead => self.lr_iou_head,
        }
    }

    fn frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::BackboneRgb | ParamGroup::BackboneTir | ParamGroup::BackboneFused => {
                !self.finetune.backbone
            }
            ParamGroup::Predictor => !self.finetune.predictor,
            ParamGroup::IouHead => !self.finetune.iou,
        }
    }
}

/// Effective learning rate per group: base × finetune_gain × (TIR multiplier
/// for the TIR extractor only), zeroed for frozen groups.
pub fn effective_rates(
    config: &TrainConfig,
    fusion: &crate::fusion::FusionConfig,
) -> BTreeMap<ParamGroup, f64> {
    let mut out = BTreeMap::new();
    for group in [
        ParamGroup::BackboneRgb,
        ParamGroup::BackboneTir,
        ParamGroup::BackboneFused,
        ParamGroup::Predictor,
        ParamGroup::IouHead,
    ] {
        let mult = if group == ParamGroup::BackboneTir {
            fusion.tir_lr_multiplier
        } else {
            1.0
        };
        let rate = if config.frozen(group) {
            0.0
        } else {
            config.base_rate(group) * config.finetune_gain * mult
        };
        out.insert(group, rate);
    }
    out
}

/// Train/test sample pair drawn from one sequence segment.
#[derive(Debug, Clone)]
pub struct Episode {
    pub train: SampleSet,
    pub test: SampleSet,
    pub sequence: String,
}

/// Draw `n_frames` frames uniformly without replacement from each half of
/// the sequence (train from the first half, test from the second).
pub fn sample_episode(seq: &Sequence, n_frames: usize, rng: &mut ChaCha12Rng) -> Result<Episode> {
    if seq.len() < 2 * n_frames {
        return Err(Error::SequenceTooShort {
            length: seq.len(),
            required: 2 * n_frames,
        });
    }
    let half = seq.len() / 2;
    let mut draw = |lo: usize, hi: usize| -> Vec<usize> {
        let mut idx = rand::seq::index::sample(rng, hi - lo, n_frames)
            .into_iter()
            .map(|i| i + lo)
            .collect::<Vec<_>>();
        idx.sort_unstable();
        idx
    };
    let train_idx = draw(0, half);
    let test_idx = draw(half, seq.len());
    let collect = |idx: &[usize]| -> Result<SampleSet> {
        SampleSet::new(
            idx.iter()
                .map(|&i| (seq.frames[i].clone(), seq.groundtruth[i]))
                .collect(),
        )
    };
    Ok(Episode {
        train: collect(&train_idx)?,
        test: collect(&test_idx)?,
        sequence: seq.name.clone(),
    })
}

/// Losses and diagnostics of one gradient step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: u64,
    pub l_cls: f64,
    pub l_iou: f64,
    pub l_total: f64,
    /// L2 norm of the accumulated gradient per parameter group.
    pub grad_norms: BTreeMap<ParamGroup, f64>,
}

struct EpisodeGrads {
    grads: BTreeMap<String, (ParamGroup, ArrayD<f64>)>,
    l_cls: f64,
    l_iou: f64,
    l_total: f64,
}

struct FrameForward {
    routed: RoutedInputs,
    /// Ground truth in crop pixels.
    gt_crop: BoundingBox,
}

/// Crop one frame around its (jittered) ground-truth center.
fn training_crop(
    frame: &crate::data_model::FramePair,
    gt: &BoundingBox,
    config: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(crate::data_model::FramePair, BoundingBox)> {
    let side = config.crop_scale * (gt.w * gt.h).sqrt();
    let jx = rng.gen_range(-1.0..1.0) * config.center_jitter * side;
    let jy = rng.gen_range(-1.0..1.0) * config.center_jitter * side;
    let (cx, cy) = gt.center();
    let virtual_box = BoundingBox::from_center(cx + jx, cy + jy, gt.w, gt.h)?;
    let (crop, transform) =
        crop_search_region(frame, &virtual_box, config.crop_scale, config.crop_size)?;
    Ok((crop, transform.invert_box(gt)))
}

fn episode_pass(
    model: &TrackModel,
    episode: &Episode,
    config: &TrainConfig,
    rng: &mut ChaCha12Rng,
    step: u64,
) -> Result<EpisodeGrads> {
    let mut tape = Tape::new();
    let mut registry = ParamRegistry::default();
    let mut extraction = TrainableExtraction::new(model);

    let pred_vars = PredictorVars::trainable(&mut tape, &model.predictor);
    registry.push(ParamGroup::Predictor, "predictor/init_conv/weight".into(), pred_vars.conv_w);
    registry.push(ParamGroup::Predictor, "predictor/init_conv/bias".into(), pred_vars.conv_b);
    let pred_tir_vars = model.predictor_tir.as_ref().map(|p| {
        let v = PredictorVars::trainable(&mut tape, p);
        registry.push(ParamGroup::Predictor, "predictor_tir/init_conv/weight".into(), v.conv_w);
        registry.push(ParamGroup::Predictor, "predictor_tir/init_conv/bias".into(), v.conv_b);
        v
    });
    let iou_vars = IouVars::new(&mut tape, &model.iou_head, true);
    for (name, var) in iou_vars.param_vars() {
        registry.push(ParamGroup::IouHead, format!("iou_head/{name}"), var);
    }

    let forward_frames = |items: &[(crate::data_model::FramePair, BoundingBox)],
                              tape: &mut Tape,
                              extraction: &mut TrainableExtraction,
                              registry: &mut ParamRegistry,
                              rng: &mut ChaCha12Rng|
     -> Result<Vec<FrameForward>> {
        items
            .iter()
            .map(|(frame, gt)| {
                let (crop, gt_crop) = training_crop(frame, gt, config, rng)?;
                let bundles = extraction.bundles(tape, &crop, registry)?;
                let routed = route_inputs(tape, &model.fusion, &bundles)?;
                Ok(FrameForward { routed, gt_crop })
            })
            .collect()
    };
    let train_frames =
        forward_frames(&episode.train.items, &mut tape, &mut extraction, &mut registry, rng)?;
    let test_frames =
        forward_frames(&episode.test.items, &mut tape, &mut extraction, &mut registry, rng)?;

    // ---- discriminative filter: init + unrolled steepest descent ----
    let sigma = model.predictor.label.sigma;
    let label_cfg = LabelConfig { sigma };
    let k = model.predictor.filter_size;
    let n_iter = model.predictor.n_iter;
    let lambda = model.predictor.lambda;

    struct Stream {
        train_feats: Vec<Var>,
        test_feats: Vec<Var>,
        vars: PredictorVars,
    }
    let mut streams = Vec::new();
    match &train_frames[0].routed.predictor {
        PredictorFeatures::Single { .. } => {
            let pick = |f: &FrameForward| match f.routed.predictor {
                PredictorFeatures::Single { block4, .. } => block4,
                _ => unreachable!("stream variant is fixed per fusion config"),
            };
            streams.push(Stream {
                train_feats: train_frames.iter().map(pick).collect(),
                test_feats: test_frames.iter().map(pick).collect(),
                vars: pred_vars,
            });
        }
        PredictorFeatures::PerModality { .. } => {
            let pick = |f: &FrameForward, tir: bool| match f.routed.predictor {
                PredictorFeatures::PerModality { rgb_block4, tir_block4, .. } => {
                    if tir {
                        tir_block4
                    } else {
                        rgb_block4
                    }
                }
                _ => unreachable!("stream variant is fixed per fusion config"),
            };
            streams.push(Stream {
                train_feats: train_frames.iter().map(|f| pick(f, false)).collect(),
                test_feats: test_frames.iter().map(|f| pick(f, false)).collect(),
                vars: pred_vars,
            });
            streams.push(Stream {
                train_feats: train_frames.iter().map(|f| pick(f, true)).collect(),
                test_feats: test_frames.iter().map(|f| pick(f, true)).collect(),
                vars: pred_tir_vars.ok_or_else(|| {
                    Error::InvalidConfig("response-level fusion needs a TIR predictor".into())
                })?,
            });
        }
    }

    let stride4 = match &train_frames[0].routed.predictor {
        PredictorFeatures::Single { stride4, .. }
        | PredictorFeatures::PerModality { stride4, .. } => *stride4,
    };
    let feat_box = |b: &BoundingBox| crate::iou_net::box_to_feature_coords(b, stride4);

    let mut histories = Vec::new();
    for stream in &streams {
        let items: Vec<TrainSample> = stream
            .train_feats
            .iter()
            .zip(&train_frames)
            .map(|(feats, frame)| TrainSample {
                features: *feats,
                target: feat_box(&frame.gt_crop),
                weight: 1.0,
            })
            .collect();
        let samples = TrainSamples::new(&tape, items)?;
        let shape = tape.value(stream.train_feats[0]).shape().to_vec();
        let labels: Vec<Var> = train_frames
            .iter()
            .map(|f| {
                let c = feat_box(&f.gt_crop).center();
                tape.constant(gaussian_label(c, (shape[1], shape[2]), &label_cfg))
            })
            .collect();
        let f0 = init_filter(&mut tape, &stream.vars, &samples, k)?;
        let opt = optimize_filter(&mut tape, f0, &samples, &labels, lambda, n_iter)?;
        histories.push(opt);
    }

    // per-iterate test responses, summed across streams (response fusion)
    let test_shape = tape.value(streams[0].test_feats[0]).shape().to_vec();
    let test_labels: Vec<Var> = test_frames
        .iter()
        .map(|f| {
            let c = feat_box(&f.gt_crop).center();
            tape.constant(gaussian_label(c, (test_shape[1], test_shape[2]), &label_cfg))
        })
        .collect();
    let mut per_iterate = Vec::with_capacity(n_iter + 1);
    for i in 0..histories[0].history.len() {
        let mut responses = Vec::with_capacity(test_frames.len());
        for t in 0..test_frames.len() {
            let mut acc: Option<Var> = None;
            for (stream, hist) in streams.iter().zip(&histories) {
                let s = compute_response(&mut tape, stream.test_feats[t], hist.history[i])?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, s),
                    None => s,
                });
            }
            responses.push(acc.expect("at least one stream"));
        }
        per_iterate.push(responses);
    }
    let l_cls = classification_loss_from_responses(
        &mut tape,
        &per_iterate,
        &test_labels,
        n_iter,
        model.predictor.residual,
    )?;

    // ---- IoU head: modulation from the first train frame, jittered
    // proposals on every test frame against true overlaps ----
    let reference = &train_frames[0];
    let modulation =
        compute_modulation(&mut tape, &iou_vars, &reference.routed.iou, &reference.gt_crop)?;
    let mut predictions = Vec::new();
    let mut targets = Vec::new();
    for frame in &test_frames {
        let tb = test_branch(&mut tape, &iou_vars, &frame.routed.iou);
        let proposals = jitter_proposals(
            rng,
            &frame.gt_crop,
            config.proposals_per_frame,
            config.proposal_sigma_center,
            config.proposal_sigma_logscale,
        );
        for p in proposals {
            let bv = tape.constant(
                ArrayD::from_shape_vec(IxDyn(&[4]), vec![p.x, p.y, p.w, p.h]).unwrap(),
            );
            predictions.push(predict_iou_pooled(&mut tape, &iou_vars, &modulation, &tb, bv));
            targets.push(crate::data_model::iou(&p, &frame.gt_crop));
        }
    }
    let l_iou = iou_regression_loss(&mut tape, &predictions, &targets)?;

    let weighted_iou = tape.scale(l_iou, config.beta);
    let l_total = tape.add(l_cls, weighted_iou);

    let (cls_v, iou_v, total_v) = (tape.scalar(l_cls), tape.scalar(l_iou), tape.scalar(l_total));
    if !total_v.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {step} (sequence {}): L_cls={cls_v}, L_iou={iou_v}",
            episode.sequence
        )));
    }

    let grads = tape.backward(l_total);
    let mut by_name = BTreeMap::new();
    for (group, name, var) in &registry.entries {
        let shape = tape.value(*var).shape().to_vec();
        let g = grads.get_or_zeros(*var, &shape);
        by_name.insert(name.clone(), (*group, g));
    }
    Ok(EpisodeGrads {
        grads: by_name,
        l_cls: cls_v,
        l_iou: iou_v,
        l_total: total_v,
    })
}

/// Stateful trainer: owns the model, momentum buffers,
/// and the step counter, so runs can checkpoint and resume exactly.
pub struct Trainer {
    pub model: TrackModel,
    pub config: TrainConfig,
    pub build_seed: u64,
    pub step: u64,
    momentum: BTreeMap<String, ArrayD<f64>>,
}

impl Trainer {
    pub fn new(model: TrackModel, build_seed: u64, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.fusion.validate()?;
        Ok(Self {
            model,
            config,
            build_seed,
            step: 0,
            momentum: BTreeMap::new(),
        })
    }

    pub fn from_checkpoint(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, build_seed, state) = load_checkpoint(path)?;
        Ok(Self {
            model,
            config,
            build_seed,
            step: state.step,
            momentum: state.momentum.into_iter().collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let state = TrainState {
            step: self.step,
            momentum: self.momentum.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        };
        save_checkpoint(path, &self.model, self.build_seed, &state)
    }

    pub fn effective_rates(&self) -> BTreeMap<ParamGroup, f64> {
        effective_rates(&self.config, &self.model.fusion)
    }

    /// One gradient step over a batch of episodes.
    pub fn train_step(&mut self, episodes: &[Episode]) -> Result<StepStats> {
        if episodes.is_empty() {
            return Err(Error::InvalidConfig("empty episode batch".into()));
        }
        let step = self.step;
        let passes: Vec<Result<EpisodeGrads>> = episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| {
                let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(
                    mix_seed(self.config.seed, "episode"),
                    &format!("{step}/{i}"),
                ));
                episode_pass(&self.model, ep, &self.config, &mut rng, step)
            })
            .collect();

        let mut acc: BTreeMap<String, (ParamGroup, ArrayD<f64>)> = BTreeMap::new();
        let (mut l_cls, mut l_iou, mut l_total) = (0.0, 0.0, 0.0);
        for pass in passes {
            let pass = pass?;
            l_cls += pass.l_cls;
            l_iou += pass.l_iou;
            l_total += pass.l_total;
            for (name, (group, g)) in pass.grads {
                match acc.get_mut(&name) {
                    Some((_, total)) => *total += &g,
                    None => {
                        acc.insert(name, (group, g));
                    }
                }
            }
        }
        let n = episodes.len() as f64;
        let rates = self.effective_rates();
        let mut grad_norms: BTreeMap<ParamGroup, f64> = BTreeMap::new();
        self.model.visit(|group, _, _| {
            grad_norms.entry(group).or_insert(0.0);
        });

        // average over the batch, then clip the global norm
        let mut global_sq = 0.0;
        for (_, (group, g)) in acc.iter_mut() {
            *g /= n;
            let sq = g.iter().map(|v| v * v).sum::<f64>();
            *grad_norms.entry(*group).or_insert(0.0) += sq;
            global_sq += sq;
        }
        if self.config.grad_clip > 0.0 {
            let norm = global_sq.sqrt();
            if norm > self.config.grad_clip {
                let s = self.config.grad_clip / norm;
                for (_, (_, g)) in acc.iter_mut() {
                    *g *= s;
                }
            }
        }

        // SGD with momentum per named parameter
        let mut updates: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        for (name, (group, g)) in acc {
            let rate = rates[&group];
            let v = match self.momentum.remove(&name) {
                Some(prev) => prev * self.config.momentum + &g,
                None => g,
            };
            if rate != 0.0 {
                updates.insert(name.clone(), &v * rate);
            }
            self.momentum.insert(name, v);
        }
        self.model.visit_mut(|_, name, arr| {
            if let Some(delta) = updates.get(&name) {
                *arr -= delta;
            }
        });
        for norm in grad_norms.values_mut() {
            *norm = norm.sqrt();
        }

        self.step += 1;
        Ok(StepStats {
            step,
            l_cls: l_cls / n,
            l_iou: l_iou / n,
            l_total: l_total / n,
            grad_norms,
        })
    }

    /// Run remaining steps (deterministic given the config seed), optionally
    /// writing periodic checkpoints and a loss-history CSV under `out_dir`.
    pub fn run(&mut self, dataset: &[Sequence], out_dir: Option<&Path>) -> Result<Vec<StepStats>> {
        if dataset.is_empty() {
            return Err(Error::InvalidConfig("empty training dataset".into()));
        }
        let eligible: Vec<&Sequence> = dataset
            .iter()
            .filter(|s| s.len() >= 2 * self.config.n_frames)
            .collect();
        if eligible.is_empty() {
            return Err(Error::SequenceTooShort {
                length: dataset.iter().map(|s| s.len()).max().unwrap_or(0),
                required: 2 * self.config.n_frames,
            });
        }
        // learning-rate ledger: effective == base × gain × multiplier
        let rates = self.effective_rates();
        for (group, rate) in &rates {
            let mult = if *group == ParamGroup::BackboneTir {
                self.model.fusion.tir_lr_multiplier
            } else {
                1.0
            };
            let expected = if self.config.frozen(*group) {
                0.0
            } else {
                self.config.base_rate(*group) * self.config.finetune_gain * mult
            };
            debug_assert_eq!(*rate, expected, "learning-rate ledger violated for {group}");
        }

        let mut history = Vec::new();
        while self.step < self.config.steps {
            let step = self.step;
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(
                mix_seed(self.config.seed, "sampling"),
                &step.to_string(),
            ));
            let mut episodes = Vec::with_capacity(self.config.batch_size);
            for _ in 0..self.config.batch_size {
                let seq = eligible[rng.gen_range(0..eligible.len())];
                episodes.push(sample_episode(seq, self.config.n_frames, &mut rng)?);
            }
            let stats = self.train_step(&episodes)?;
            history.push(stats);
            if let Some(dir) = out_dir {
                if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0
                {
                    self.save(&dir.join(format!("checkpoint_{:06}.mftk", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join("checkpoint_final.mftk"))?;
            append_loss_history(&dir.join("loss_history.csv"), &history)?;
        }
        Ok(history)
    }
}

/// Loss history CSV (`step,L_cls,L_iou,L_total`), appending on resume.
pub fn append_loss_history(path: &Path, stats: &[StepStats]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let fresh = !path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(file, "step,L_cls,L_iou,L_total").map_err(|e| Error::io(path, e))?;
    }
    for s in stats {
        writeln!(file, "{},{},{},{}", s.step, s.l_cls, s.l_iou, s.l_total)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Modality};
    use crate::fusion::FusionConfig;
    use crate::iou_net::IouHeadConfig;
    use crate::model::ModelConfig;
    use crate::model_predictor::PredictorConfig;
    use crate::synth_data::{generate_toy_sequence, MotionModel, ToySequenceSpec};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                widths: [3, 4, 4, 6],
                strides: [2, 2, 2, 1],
                ..BackboneConfig::default()
            },
            predictor: PredictorConfig {
                filter_size: 3,
                n_iter: 2,
                ..PredictorConfig::default()
            },
            iou: IouHeadConfig {
                mid_channels: 3,
                test_channels: 3,
                g_hidden: (6, 4),
                ..IouHeadConfig::default()
            },
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            n_frames: 2,
            batch_size: 1,
            steps: 3,
            crop_scale: 4.0,
            crop_size: 32,
            proposals_per_frame: 4,
            checkpoint_every: 0,
            finetune_gain: 1.0,
            ..TrainConfig::default()
        }
    }

    fn toy_dataset(n: usize, frames: usize) -> Vec<Sequence> {
        (0..n)
            .map(|i| {
                generate_toy_sequence(&ToySequenceSpec {
                    num_frames: frames,
                    image_size: 48,
                    target_size_range: (8.0, 8.0),
                    motion: MotionModel { velocity: (0.8, 0.4), jitter: 0.2 },
                    start: None,
                    rgb_corruption: vec![],
                    tir_corruption: vec![],
                    seed: 40 + i as u64,
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn episode_sampling_respects_halves() {
        let seq = &toy_dataset(1, 10)[0];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..5 {
            let ep = sample_episode(seq, 3, &mut rng).unwrap();
            for (f, _) in &ep.train.items {
                assert!(f.index <= 4, "train index {} outside first half", f.index);
            }
            for (f, _) in &ep.test.items {
                assert!(f.index >= 5, "test index {} outside second half", f.index);
            }
            // no frame leaks between the sets
            let train_idx: std::collections::BTreeSet<_> =
                ep.train.items.iter().map(|(f, _)| f.index).collect();
            for (f, _) in &ep.test.items {
                assert!(!train_idx.contains(&f.index));
            }
        }
    }

    #[test]
    fn episode_sampling_forced_and_error_cases() {
        let seq6 = &toy_dataset(1, 6)[0];
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let ep = sample_episode(seq6, 3, &mut rng).unwrap();
        let train: Vec<usize> = ep.train.items.iter().map(|(f, _)| f.index).collect();
        let test: Vec<usize> = ep.test.items.iter().map(|(f, _)| f.index).collect();
        assert_eq!(train, vec![0, 1, 2]);
        assert_eq!(test, vec![3, 4, 5]);

        let seq5 = &generate_toy_sequence(&ToySequenceSpec {
            num_frames: 5,
            image_size: 48,
            target_size_range: (8.0, 8.0),
            motion: MotionModel { velocity: (0.5, 0.0), jitter: 0.0 },
            start: Some((10.0, 10.0)),
            rgb_corruption: vec![],
            tir_corruption: vec![],
            seed: 9,
        })
        .unwrap();
        assert!(sample_episode(seq5, 3, &mut rng).is_err());
    }

    #[test]
    fn effective_rates_follow_the_ledger() {
        let config = TrainConfig {
            lr_backbone_rgb: 0.2,
            lr_backbone_tir: 0.2,
            lr_predictor: 0.4,
            lr_iou_head: 0.6,
            finetune_gain: 0.001,
            ..TrainConfig::default()
        };
        let fusion = FusionConfig::feature(Modality::Fused, Modality::Fused).with_tir_multiplier(10.0);
        let rates = effective_rates(&config, &fusion);
        assert_eq!(rates[&ParamGroup::BackboneRgb], 0.2 * 0.001);
        assert_eq!(rates[&ParamGroup::BackboneTir], 0.2 * 0.001 * 10.0);
        assert_eq!(rates[&ParamGroup::Predictor], 0.4 * 0.001);
        assert_eq!(rates[&ParamGroup::IouHead], 0.6 * 0.001);
        // tir multiplier = 10 means exactly 10× the rgb extractor rate
        assert_eq!(
            rates[&ParamGroup::BackboneTir],
            10.0 * rates[&ParamGroup::BackboneRgb]
        );

        let frozen = TrainConfig {
            finetune: FinetuneFlags { backbone: false, iou: true, predictor: true },
            ..config
        };
        let fr = effective_rates(&frozen, &fusion);
        assert_eq!(fr[&ParamGroup::BackboneRgb], 0.0);
        assert!(fr[&ParamGroup::IouHead] > 0.0);
    }

    #[test]
    fn beta_zero_means_total_equals_cls() {
        let dataset = toy_dataset(1, 6);
        let model = TrackModel::build(&tiny_model_config(), &FusionConfig::single_rgb(), 5).unwrap();
        let config = TrainConfig { beta: 0.0, ..tiny_train_config() };
        let mut trainer = Trainer::new(model, 5, config).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let ep = sample_episode(&dataset[0], 2, &mut rng).unwrap();
        let stats = trainer.train_step(&[ep]).unwrap();
        assert!((stats.l_total - stats.l_cls).abs() < 1e-15);
    }

    #[test]
    fn gradient_flow_matches_routing() {
        let dataset = toy_dataset(1, 6);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let ep = sample_episode(&dataset[0], 2, &mut rng).unwrap();

        // feature-level fusion: both extractors receive gradient
        let fused = TrackModel::build(
            &tiny_model_config(),
            &FusionConfig::feature(Modality::Fused, Modality::Fused),
            7,
        )
        .unwrap();
        let mut trainer = Trainer::new(fused, 7, tiny_train_config()).unwrap();
        let stats = trainer.train_step(std::slice::from_ref(&ep)).unwrap();
        assert!(stats.grad_norms[&ParamGroup::BackboneRgb] > 0.0);
        assert!(stats.grad_norms[&ParamGroup::BackboneTir] > 0.0);

        // single_rgb routing on a model that owns a TIR extractor: its
        // gradient is exactly zero
        let mut hybrid = TrackModel::build(
            &tiny_model_config(),
            &FusionConfig::feature(Modality::Rgb, Modality::Rgb),
            7,
        )
        .unwrap();
        hybrid.fusion = FusionConfig::single_rgb();
        let mut trainer2 = Trainer::new(hybrid, 7, tiny_train_config()).unwrap();
        let stats2 = trainer2.train_step(&[ep]).unwrap();
        assert!(stats2.grad_norms[&ParamGroup::BackboneRgb] > 0.0);
        assert_eq!(stats2.grad_norms[&ParamGroup::BackboneTir], 0.0);
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let dataset = toy_dataset(1, 6);
        let model = TrackModel::build(&tiny_model_config(), &FusionConfig::single_rgb(), 9).unwrap();
        let mut before = std::collections::BTreeMap::new();
        model.visit(|_, n, a| {
            before.insert(n, a.clone());
        });
        let config = TrainConfig { steps: 0, ..tiny_train_config() };
        let mut trainer = Trainer::new(model, 9, config).unwrap();
        let history = trainer.run(&dataset, None).unwrap();
        assert!(history.is_empty());
        trainer.model.visit(|_, n, a| {
            assert_eq!(&before[&n], a);
        });
    }

    #[test]
    fn same_seed_gives_identical_loss_history() {
        let dataset = toy_dataset(2, 6);
        let run = || {
            let model =
                TrackModel::build(&tiny_model_config(), &FusionConfig::pixel(), 11).unwrap();
            let mut trainer = Trainer::new(model, 11, tiny_train_config()).unwrap();
            trainer
                .run(&dataset, None)
                .unwrap()
                .iter()
                .map(|s| (s.l_cls, s.l_iou, s.l_total))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let dataset = toy_dataset(2, 6);
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { steps: 4, ..tiny_train_config() };

        // uninterrupted
        let model = TrackModel::build(&tiny_model_config(), &FusionConfig::single_tir(), 13).unwrap();
        let mut full = Trainer::new(model.clone(), 13, config.clone()).unwrap();
        let full_hist = full.run(&dataset, None).unwrap();

        // interrupted at step 2
        let mut first = Trainer::new(model, 13, TrainConfig { steps: 2, ..config.clone() }).unwrap();
        first.run(&dataset, None).unwrap();
        let ckpt = dir.path().join("mid.mftk");
        first.save(&ckpt).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ckpt, config).unwrap();
        assert_eq!(resumed.step, 2);
        let resumed_hist = resumed.run(&dataset, None).unwrap();

        let last_full = full_hist.last().unwrap();
        let last_resumed = resumed_hist.last().unwrap();
        assert!(
            (last_full.l_total - last_resumed.l_total).abs() < 1e-6,
            "uninterrupted {} vs resumed {}",
            last_full.l_total,
            last_resumed.l_total
        );
        // parameters agree too
        let mut a = std::collections::BTreeMap::new();
        full.model.visit(|_, n, arr| {
            a.insert(n, arr.clone());
        });
        resumed.model.visit(|_, n, arr| {
            let diff = (&a[&n] - arr).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9, "{n} differs by {diff}");
        });
    }

    #[test]
    fn response_level_fusion_trains_both_predictors() {
        let dataset = toy_dataset(1, 6);
        let model = TrackModel::build(
            &tiny_model_config(),
            &FusionConfig::response(Modality::Tir),
            15,
        )
        .unwrap();
        let mut trainer = Trainer::new(model, 15, tiny_train_config()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let ep = sample_episode(&dataset[0], 2, &mut rng).unwrap();
        let stats = trainer.train_step(&[ep]).unwrap();
        assert!(stats.l_total.is_finite());
        assert!(stats.grad_norms[&ParamGroup::Predictor] > 0.0);
    }
}
