//! Bounding-box estimation head.
//!
//! A reference branch computes a per-channel modulation vector from the first
//! frame (conv → precise ROI pool → fully connected); the test branch runs
//! two conv layers per feature block, pools candidate boxes with PrPool,
//! modulates channels, and predicts an overlap score with a three-layer
//! fully connected head. Boxes are refined by gradient ascent on that score
//! over (center, log-size), keeping sizes positive.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::backbone::{ConvLayer, RELU_SLOPE};
use crate::data_model::BoundingBox;
use crate::error::{Error, Result};
use crate::fusion::IouFeatures;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IouHeadConfig {
    /// Width of the per-block reference/test conv layers.
    pub mid_channels: usize,
    /// Per-block channel count after the test branch (modulated channels).
    pub test_channels: usize,
    /// Reference-branch pooled size.
    pub ref_pool: usize,
    /// Test-branch pooled size.
    pub test_pool: usize,
    /// Hidden widths of the three-layer predictor g.
    pub g_hidden: (usize, usize),
    pub weight_init_seed: u64,
}

impl Default for IouHeadConfig {
    fn default() -> Self {
        Self {
            mid_channels: 16,
            test_channels: 16,
            ref_pool: 5,
            test_pool: 3,
            g_hidden: (64, 32),
            weight_init_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FcLayer {
    /// out×in
    pub weight: ArrayD<f64>,
    pub bias: ArrayD<f64>,
}

impl FcLayer {
    fn init(rng: &mut ChaCha12Rng, out: usize, inp: usize) -> Self {
        let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).unwrap();
        Self {
            weight: ArrayD::from_shape_fn(IxDyn(&[out, inp]), |_| normal.sample(rng)),
            bias: ArrayD::zeros(IxDyn(&[out])),
        }
    }
}

/// One feature block's branch pair.
#[derive(Debug, Clone)]
pub struct BlockBranch {
    pub ref_conv: ConvLayer,
    pub test_conv1: ConvLayer,
    pub test_conv2: ConvLayer,
    /// mid·ref_pool² → test_channels (modulation reduction)
    pub ref_fc: FcLayer,
}

/// Learned weights of the IoU head for a given (block3, block4) channel pair.
#[derive(Debug, Clone)]
pub struct IouHeadParams {
    pub config: IouHeadConfig,
    pub block3: BlockBranch,
    pub block4: BlockBranch,
    /// The IoU predictor g: exactly three fully connected layers.
    pub g: [FcLayer; 3],
}

impl IouHeadParams {
    pub fn init(config: &IouHeadConfig, channels3: usize, channels4: usize) -> Result<Self> {
        if config.ref_pool == 0 || config.test_pool == 0 {
            return Err(Error::InvalidConfig("pooled sizes must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(config.weight_init_seed);
        let mid = config.mid_channels;
        let tc = config.test_channels;
        let branch = |cin: usize, rng: &mut ChaCha12Rng| BlockBranch {
            ref_conv: ConvLayer::init(rng, mid, cin, 3),
            test_conv1: ConvLayer::init(rng, mid, cin, 3),
            test_conv2: ConvLayer::init(rng, tc, mid, 3),
            ref_fc: FcLayer::init(rng, tc, mid * config.ref_pool * config.ref_pool),
        };
        let block3 = branch(channels3, &mut rng);
        let block4 = branch(channels4, &mut rng);
        let g_in = 2 * tc * config.test_pool * config.test_pool;
        let g = [
            FcLayer::init(&mut rng, config.g_hidden.0, g_in),
            FcLayer::init(&mut rng, config.g_hidden.1, config.g_hidden.0),
            FcLayer::init(&mut rng, 1, config.g_hidden.1),
        ];
        Ok(Self {
            config: config.clone(),
            block3,
            block4,
            g,
        })
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a ArrayD<f64>)) {
        for (tag, b) in [("block3", &self.block3), ("block4", &self.block4)] {
            f(format!("{tag}/ref_conv/weight"), &b.ref_conv.weight);
            f(format!("{tag}/ref_conv/bias"), &b.ref_conv.bias);
            f(format!("{tag}/test_conv1/weight"), &b.test_conv1.weight);
            f(format!("{tag}/test_conv1/bias"), &b.test_conv1.bias);
            f(format!("{tag}/test_conv2/weight"), &b.test_conv2.weight);
            f(format!("{tag}/test_conv2/bias"), &b.test_conv2.bias);
            f(format!("{tag}/ref_fc/weight"), &b.ref_fc.weight);
            f(format!("{tag}/ref_fc/bias"), &b.ref_fc.bias);
        }
        for (i, layer) in self.g.iter().enumerate() {
            f(format!("g/fc{}/weight", i + 1), &layer.weight);
            f(format!("g/fc{}/bias", i + 1), &layer.bias);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut ArrayD<f64>)) {
        for (tag, b) in [("block3", &mut self.block3), ("block4", &mut self.block4)] {
            f(format!("{tag}/ref_conv/weight"), &mut b.ref_conv.weight);
            f(format!("{tag}/ref_conv/bias"), &mut b.ref_conv.bias);
            f(format!("{tag}/test_conv1/weight"), &mut b.test_conv1.weight);
            f(format!("{tag}/test_conv1/bias"), &mut b.test_conv1.bias);
            f(format!("{tag}/test_conv2/weight"), &mut b.test_conv2.weight);
            f(format!("{tag}/test_conv2/bias"), &mut b.test_conv2.bias);
            f(format!("{tag}/ref_fc/weight"), &mut b.ref_fc.weight);
            f(format!("{tag}/ref_fc/bias"), &mut b.ref_fc.bias);
        }
        for (i, layer) in self.g.iter_mut().enumerate() {
            f(format!("g/fc{}/weight", i + 1), &mut layer.weight);
            f(format!("g/fc{}/bias", i + 1), &mut layer.bias);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BranchVars {
    ref_conv_w: Var,
    ref_conv_b: Var,
    test_conv1_w: Var,
    test_conv1_b: Var,
    test_conv2_w: Var,
    test_conv2_b: Var,
    ref_fc_w: Var,
    ref_fc_b: Var,
}

/// Tape handles for the full head.
#[derive(Debug, Clone, Copy)]
pub struct IouVars {
    block3: BranchVars,
    block4: BranchVars,
    g: [(Var, Var); 3],
    test_pool: usize,
    ref_pool: usize,
}

impl IouVars {
    pub fn new(tape: &mut Tape, params: &IouHeadParams, trainable: bool) -> Self {
        let insert = |tape: &mut Tape, a: &ArrayD<f64>| {
            if trainable {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let branch = |tape: &mut Tape, b: &BlockBranch| BranchVars {
            ref_conv_w: insert(tape, &b.ref_conv.weight),
            ref_conv_b: insert(tape, &b.ref_conv.bias),
            test_conv1_w: insert(tape, &b.test_conv1.weight),
            test_conv1_b: insert(tape, &b.test_conv1.bias),
            test_conv2_w: insert(tape, &b.test_conv2.weight),
            test_conv2_b: insert(tape, &b.test_conv2.bias),
            ref_fc_w: insert(tape, &b.ref_fc.weight),
            ref_fc_b: insert(tape, &b.ref_fc.bias),
        };
        let block3 = branch(tape, &params.block3);
        let block4 = branch(tape, &params.block4);
        let g = [
            (insert(tape, &params.g[0].weight), insert(tape, &params.g[0].bias)),
            (insert(tape, &params.g[1].weight), insert(tape, &params.g[1].bias)),
            (insert(tape, &params.g[2].weight), insert(tape, &params.g[2].bias)),
        ];
        Self {
            block3,
            block4,
            g,
            test_pool: params.config.test_pool,
            ref_pool: params.config.ref_pool,
        }
    }

    /// Leaf handles in `visit` order (for gradient collection).
    pub fn param_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (tag, b) in [("block3", &self.block3), ("block4", &self.block4)] {
            out.push((format!("{tag}/ref_conv/weight"), b.ref_conv_w));
            out.push((format!("{tag}/ref_conv/bias"), b.ref_conv_b));
            out.push((format!("{tag}/test_conv1/weight"), b.test_conv1_w));
            out.push((format!("{tag}/test_conv1/bias"), b.test_conv1_b));
            out.push((format!("{tag}/test_conv2/weight"), b.test_conv2_w));
            out.push((format!("{tag}/test_conv2/bias"), b.test_conv2_b));
            out.push((format!("{tag}/ref_fc/weight"), b.ref_fc_w));
            out.push((format!("{tag}/ref_fc/bias"), b.ref_fc_b));
        }
        for (i, (w, b)) in self.g.iter().enumerate() {
            out.push((format!("g/fc{}/weight", i + 1), *w));
            out.push((format!("g/fc{}/bias", i + 1), *b));
        }
        out
    }
}

/// Per-channel conditioning vector computed from the reference frame.
#[derive(Debug, Clone, Copy)]
pub struct ModulationVector {
    pub vector: Var,
}

/// Box in pixel coordinates to the feature grid sampled at integer nodes:
/// a node at index j covers pixels [j·s, (j+1)·s), so point p maps to
/// p/s − 0.5.
pub fn box_to_feature_coords(b: &BoundingBox, stride: usize) -> BoundingBox {
    let s = stride as f64;
    BoundingBox {
        x: b.x / s - 0.5,
        y: b.y / s - 0.5,
        w: b.w / s,
        h: b.h / s,
    }
}

fn constant_box(tape: &mut Tape, b: &BoundingBox) -> Var {
    tape.constant(ArrayD::from_shape_vec(IxDyn(&[4]), vec![b.x, b.y, b.w, b.h]).unwrap())
}

/// Reference branch: conv → PrPool over B0 → fully connected reduction to a
/// per-channel vector. Computed once per tracked sequence.
pub fn compute_modulation(
    tape: &mut Tape,
    vars: &IouVars,
    feats: &IouFeatures,
    b0: &BoundingBox,
) -> Result<ModulationVector> {
    if b0.area() <= 0.0 {
        return Err(Error::InvalidBox("degenerate reference box".into()));
    }
    let mut parts = Vec::with_capacity(2);
    for (bv, feat, stride) in [
        (&vars.block3, feats.block3, feats.stride3),
        (&vars.block4, feats.block4, feats.stride4),
    ] {
        let conv = tape.conv2d(feat, bv.ref_conv_w, Some(bv.ref_conv_b), 1);
        let act = tape.leaky_relu(conv, RELU_SLOPE);
        let fb = box_to_feature_coords(b0, stride);
        let bbox = constant_box(tape, &fb);
        let pooled = tape.prpool(act, bbox, (vars.ref_pool, vars.ref_pool));
        let flat = tape.flatten(pooled);
        parts.push(tape.linear(flat, bv.ref_fc_w, bv.ref_fc_b));
    }
    Ok(ModulationVector {
        vector: tape.concat_c(&parts),
    })
}

/// Test-branch feature maps (two conv layers per block), computed once per
/// frame and shared across candidate boxes.
#[derive(Debug, Clone, Copy)]
pub struct TestBranch {
    pub t3: Var,
    pub t4: Var,
    pub stride3: usize,
    pub stride4: usize,
}

pub fn test_branch(tape: &mut Tape, vars: &IouVars, feats: &IouFeatures) -> TestBranch {
    let run = |tape: &mut Tape, bv: &BranchVars, feat: Var| {
        let c1 = tape.conv2d(feat, bv.test_conv1_w, Some(bv.test_conv1_b), 1);
        let a1 = tape.leaky_relu(c1, RELU_SLOPE);
        let c2 = tape.conv2d(a1, bv.test_conv2_w, Some(bv.test_conv2_b), 1);
        tape.leaky_relu(c2, RELU_SLOPE)
    };
    TestBranch {
        t3: run(tape, &vars.block3, feats.block3),
        t4: run(tape, &vars.block4, feats.block4),
        stride3: feats.stride3,
        stride4: feats.stride4,
    }
}

/// Predicted overlap for a candidate box var ([x,y,w,h] in pixels on the
/// same grid the features were extracted from). Differentiable in the box.
pub fn predict_iou_pooled(
    tape: &mut Tape,
    vars: &IouVars,
    modulation: &ModulationVector,
    test: &TestBranch,
    box_var: Var,
) -> Var {
    let mut pooled_parts = Vec::with_capacity(2);
    for (feat, stride) in [(test.t3, test.stride3), (test.t4, test.stride4)] {
        // affine map of the box node into feature coordinates
        let scaled = tape.scale(box_var, 1.0 / stride as f64);
        let offset = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.5, 0.5, 0.0, 0.0]).unwrap(),
        );
        let fb = tape.sub(scaled, offset);
        pooled_parts.push(tape.prpool(feat, fb, (vars.test_pool, vars.test_pool)));
    }
    let z = tape.concat_c(&pooled_parts);
    let modulated = tape.channel_scale(z, modulation.vector);
    let flat = tape.flatten(modulated);
    let h1 = tape.linear(flat, vars.g[0].0, vars.g[0].1);
    let a1 = tape.leaky_relu(h1, RELU_SLOPE);
    let h2 = tape.linear(a1, vars.g[1].0, vars.g[1].1);
    let a2 = tape.leaky_relu(h2, RELU_SLOPE);
    let out = tape.linear(a2, vars.g[2].0, vars.g[2].1);
    tape.sum(out)
}

/// Full prediction from raw routed features (runs the test branch too).
pub fn predict_iou(
    tape: &mut Tape,
    vars: &IouVars,
    modulation: &ModulationVector,
    feats: &IouFeatures,
    b: &BoundingBox,
) -> Result<Var> {
    if b.area() <= 0.0 {
        return Err(Error::InvalidBox("degenerate candidate box".into()));
    }
    let test = test_branch(tape, vars, feats);
    let bv = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[4]), vec![b.x, b.y, b.w, b.h]).unwrap());
    Ok(predict_iou_pooled(tape, vars, modulation, &test, bv))
}

/// Anything that can score a box and differentiate the score with respect to
/// its (x, y, w, h). The refinement loop is generic over this, so tests can
/// substitute analytic surrogates.
pub trait BoxScorer {
    fn score_and_grad(&mut self, b: &BoundingBox) -> (f64, [f64; 4]);
}

/// The real scorer: IoU head on a shared test branch.
pub struct IouScorer<'t> {
    pub tape: &'t mut Tape,
    pub vars: IouVars,
    pub modulation: ModulationVector,
    pub test: TestBranch,
}

impl BoxScorer for IouScorer<'_> {
    fn score_and_grad(&mut self, b: &BoundingBox) -> (f64, [f64; 4]) {
        let bv = self
            .tape
            .leaf(ArrayD::from_shape_vec(IxDyn(&[4]), vec![b.x, b.y, b.w, b.h]).unwrap());
        let pred = predict_iou_pooled(self.tape, &self.vars, &self.modulation, &self.test, bv);
        let score = self.tape.scalar(pred);
        let grads = self.tape.backward(pred);
        let g = grads.get_or_zeros(bv, &[4]);
        let gs = g.as_slice().unwrap();
        (score, [gs[0], gs[1], gs[2], gs[3]])
    }
}

/// Score a box without gradients.
pub fn score_box(scorer: &mut impl BoxScorer, b: &BoundingBox) -> f64 {
    scorer.score_and_grad(b).0
}

/// Gradient ascent on the predicted overlap over (center_x, center_y,
/// log w, log h); center steps are normalized by the initial box scale.
/// Returns the iterate with the highest predicted score (the initial box is
/// an iterate, so the result never scores below it).
pub fn refine_box(
    scorer: &mut impl BoxScorer,
    b_init: &BoundingBox,
    steps: usize,
    step_size: f64,
) -> (BoundingBox, f64) {
    let sigma0 = (b_init.w * b_init.h).sqrt();
    let (mut cx, mut cy) = b_init.center();
    let mut lw = b_init.w.ln();
    let mut lh = b_init.h.ln();

    let (mut best_box, mut best_score) = (*b_init, scorer.score_and_grad(b_init).0);
    for _ in 0..steps {
        let w = lw.exp();
        let h = lh.exp();
        let b = BoundingBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        };
        let (_, g) = scorer.score_and_grad(&b);
        let (gx, gy, gw, gh) = (g[0], g[1], g[2], g[3]);
        // chain rule through x = cx − w/2, y = cy − h/2, w = exp(lw), h = exp(lh)
        let d_cx = gx;
        let d_cy = gy;
        let d_lw = (gw - 0.5 * gx) * w;
        let d_lh = (gh - 0.5 * gy) * h;
        // center steps scale with the initial box size, log-size steps are raw
        cx += step_size * sigma0 * d_cx;
        cy += step_size * sigma0 * d_cy;
        lw += step_size * d_lw;
        lh += step_size * d_lh;

        let w2 = lw.exp();
        let h2 = lh.exp();
        let candidate = BoundingBox {
            x: cx - w2 / 2.0,
            y: cy - h2 / 2.0,
            w: w2,
            h: h2,
        };
        let (score, _) = scorer.score_and_grad(&candidate);
        if score > best_score {
            best_score = score;
            best_box = candidate;
        }
    }
    (best_box, best_score)
}

/// Multi-candidate refinement: refine every candidate, then average the top
/// 3 by predicted score (non-positive scores fall back to the best refined
/// box). The returned box never scores below the best initial candidate.
pub fn refine_candidates(
    scorer: &mut impl BoxScorer,
    candidates: &[BoundingBox],
    steps: usize,
    step_size: f64,
) -> (BoundingBox, f64) {
    assert!(!candidates.is_empty(), "refine_candidates: empty");
    let mut refined: Vec<(BoundingBox, f64)> = candidates
        .iter()
        .map(|c| refine_box(scorer, c, steps, step_size))
        .collect();
    refined.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let best = refined[0];

    let top: Vec<&(BoundingBox, f64)> = refined.iter().take(3).filter(|(_, s)| *s > 0.0).collect();
    if top.is_empty() {
        return best;
    }
    let wsum: f64 = top.iter().map(|(_, s)| s).sum();
    let mut acc = [0.0f64; 4];
    for (b, s) in &top {
        acc[0] += s * (b.x + b.w / 2.0);
        acc[1] += s * (b.y + b.h / 2.0);
        acc[2] += s * b.w;
        acc[3] += s * b.h;
    }
    let avg = BoundingBox {
        x: acc[0] / wsum - acc[2] / wsum / 2.0,
        y: acc[1] / wsum - acc[3] / wsum / 2.0,
        w: acc[2] / wsum,
        h: acc[3] / wsum,
    };
    let avg_score = scorer.score_and_grad(&avg).0;
    if avg_score >= best.1 {
        (avg, avg_score)
    } else {
        best
    }
}

/// Gaussian-jittered candidate boxes around a base box (center jitter is a
/// fraction of the box scale; size jitter is in log-scale).
pub fn jitter_proposals(
    rng: &mut ChaCha12Rng,
    base: &BoundingBox,
    count: usize,
    sigma_center: f64,
    sigma_logscale: f64,
) -> Vec<BoundingBox> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let scale = (base.w * base.h).sqrt();
    let (cx, cy) = base.center();
    (0..count)
        .map(|_| {
            let dx = normal.sample(rng) * sigma_center * scale;
            let dy = normal.sample(rng) * sigma_center * scale;
            let dw = (normal.sample(rng) * sigma_logscale).exp();
            let dh = (normal.sample(rng) * sigma_logscale).exp();
            let w = base.w * dw;
            let h = base.h * dh;
            BoundingBox {
                x: cx + dx - w / 2.0,
                y: cy + dy - h / 2.0,
                w,
                h,
            }
        })
        .collect()
}

/// Mean squared error between predicted and true overlaps.
pub fn iou_regression_loss(tape: &mut Tape, predictions: &[Var], targets: &[f64]) -> Result<Var> {
    if predictions.is_empty() {
        return Err(Error::ShapeMismatch("iou_regression_loss: empty input".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "iou_regression_loss: {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (p, t) in predictions.iter().zip(targets) {
        let tv = tape.constant_scalar(*t);
        let d = tape.sub(*p, tv);
        let sq = tape.mul(d, d);
        total = Some(match total {
            Some(acc) => tape.add(acc, sq),
            None => sq,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / predictions.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-scale..scale))
    }

    fn small_config() -> IouHeadConfig {
        IouHeadConfig {
            mid_channels: 4,
            test_channels: 4,
            ref_pool: 5,
            test_pool: 3,
            g_hidden: (8, 6),
            weight_init_seed: 3,
        }
    }

    fn test_features(tape: &mut Tape, rng: &mut ChaCha12Rng) -> IouFeatures {
        IouFeatures {
            block3: tape.constant(randn(rng, &[6, 12, 12], 0.5)),
            block4: tape.constant(randn(rng, &[8, 6, 6], 0.5)),
            stride3: 4,
            stride4: 8,
        }
    }

    #[test]
    fn prpool_matches_quadrature_oracle() {
        // random 1×6×6 map, box (1.3, 0.7, 3.1, 2.9), out 2×2, 1000² samples/bin
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let map = randn(&mut rng, &[1, 6, 6], 1.0);
        let mut tape = Tape::new();
        let m = tape.constant(map.clone());
        let b = tape.constant(ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.3, 0.7, 3.1, 2.9]).unwrap());
        let pooled = tape.prpool(m, b, (2, 2));

        let surface = |x: f64, y: f64| -> f64 {
            let mut acc = 0.0;
            for i in 0..6usize {
                for j in 0..6usize {
                    let hy = (1.0 - (y - i as f64).abs()).max(0.0);
                    let hx = (1.0 - (x - j as f64).abs()).max(0.0);
                    if hy > 0.0 && hx > 0.0 {
                        acc += map[[0, i, j]] * hy * hx;
                    }
                }
            }
            acc
        };
        let n = 1000usize;
        for u in 0..2usize {
            for v in 0..2usize {
                let x1 = 1.3 + v as f64 * 3.1 / 2.0;
                let y1 = 0.7 + u as f64 * 2.9 / 2.0;
                let (bw, bh) = (3.1 / 2.0, 2.9 / 2.0);
                let mut acc = 0.0;
                for a in 0..n {
                    for bidx in 0..n {
                        let x = x1 + (bidx as f64 + 0.5) * bw / n as f64;
                        let y = y1 + (a as f64 + 0.5) * bh / n as f64;
                        acc += surface(x, y);
                    }
                }
                let oracle = acc / (n * n) as f64;
                let got = tape.value(pooled)[[0, u, v]];
                assert!(
                    (oracle - got).abs() < 1e-4,
                    "bin ({u},{v}): oracle {oracle} vs {got}"
                );
            }
        }
    }

    #[test]
    fn modulation_shape_and_determinism() {
        let params = IouHeadParams::init(&small_config(), 6, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let feats = test_features(&mut tape, &mut rng);
        let vars = IouVars::new(&mut tape, &params, false);
        let b0 = BoundingBox::new(10.0, 8.0, 20.0, 16.0).unwrap();
        let m1 = compute_modulation(&mut tape, &vars, &feats, &b0).unwrap();
        let m2 = compute_modulation(&mut tape, &vars, &feats, &b0).unwrap();
        // length equals the test-branch pooled channel count (2 blocks × test_channels)
        assert_eq!(tape.value(m1.vector).len(), 8);
        assert_eq!(tape.value(m1.vector), tape.value(m2.vector));
    }

    #[test]
    fn modulation_zero_features_zero_biases_gives_zeros() {
        let params = IouHeadParams::init(&small_config(), 6, 8).unwrap();
        let mut tape = Tape::new();
        let feats = IouFeatures {
            block3: tape.constant(ArrayD::zeros(IxDyn(&[6, 12, 12]))),
            block4: tape.constant(ArrayD::zeros(IxDyn(&[8, 6, 6]))),
            stride3: 4,
            stride4: 8,
        };
        let vars = IouVars::new(&mut tape, &params, false);
        let b0 = BoundingBox::new(10.0, 8.0, 20.0, 16.0).unwrap();
        let m = compute_modulation(&mut tape, &vars, &feats, &b0).unwrap();
        assert!(tape.value(m.vector).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_modulation_annihilates_prediction() {
        let params = IouHeadParams::init(&small_config(), 6, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let feats = test_features(&mut tape, &mut rng);
        let vars = IouVars::new(&mut tape, &params, false);
        let zeros = ModulationVector {
            vector: tape.constant(ArrayD::zeros(IxDyn(&[8]))),
        };
        for bx in [(8.0, 8.0, 16.0, 12.0), (20.0, 4.0, 10.0, 20.0)] {
            let b = BoundingBox::new(bx.0, bx.1, bx.2, bx.3).unwrap();
            let p = predict_iou(&mut tape, &vars, &zeros, &feats, &b).unwrap();
            assert_eq!(tape.scalar(p), 0.0);
        }
    }

    #[test]
    fn prediction_is_finite_for_valid_boxes() {
        let params = IouHeadParams::init(&small_config(), 6, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let feats = test_features(&mut tape, &mut rng);
        let vars = IouVars::new(&mut tape, &params, false);
        let b0 = BoundingBox::new(12.0, 10.0, 18.0, 14.0).unwrap();
        let m = compute_modulation(&mut tape, &vars, &feats, &b0).unwrap();
        for _ in 0..10 {
            let b = BoundingBox::new(
                rng.gen_range(-5.0..40.0),
                rng.gen_range(-5.0..40.0),
                rng.gen_range(2.0..30.0),
                rng.gen_range(2.0..30.0),
            )
            .unwrap();
            let p = predict_iou(&mut tape, &vars, &m, &feats, &b).unwrap();
            assert!(tape.scalar(p).is_finite());
        }
    }

    #[test]
    fn predict_iou_box_gradient_matches_finite_differences() {
        let params = IouHeadParams::init(&small_config(), 6, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let feats = test_features(&mut tape, &mut rng);
        let vars = IouVars::new(&mut tape, &params, false);
        let b0 = BoundingBox::new(12.0, 10.0, 18.0, 14.0).unwrap();
        let modulation = compute_modulation(&mut tape, &vars, &feats, &b0).unwrap();
        let test = test_branch(&mut tape, &vars, &feats);
        let mut scorer = IouScorer {
            tape: &mut tape,
            vars,
            modulation,
            test,
        };
        let base = BoundingBox::new(13.3, 9.7, 17.3, 15.1).unwrap();
        let (_, grad) = scorer.score_and_grad(&base);
        let eps = 1e-4;
        for i in 0..4 {
            let mut plus = [base.x, base.y, base.w, base.h];
            let mut minus = plus;
            plus[i] += eps;
            minus[i] -= eps;
            let bp = BoundingBox::new(plus[0], plus[1], plus[2], plus[3]).unwrap();
            let bm = BoundingBox::new(minus[0], minus[1], minus[2], minus[3]).unwrap();
            let fd = (scorer.score_and_grad(&bp).0 - scorer.score_and_grad(&bm).0) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-3,
                "coord {i}: fd={fd} got={}",
                grad[i]
            );
        }
    }

    /// Analytic scorer with a known maximum, for refinement tests.
    struct QuadraticStub {
        cx: f64,
        cy: f64,
        lw: f64,
        lh: f64,
    }

    impl BoxScorer for QuadraticStub {
        fn score_and_grad(&mut self, b: &BoundingBox) -> (f64, [f64; 4]) {
            let (cx, cy) = b.center();
            let lw = b.w.ln();
            let lh = b.h.ln();
            let score = 1.0
                - (cx - self.cx).powi(2)
                - (cy - self.cy).powi(2)
                - (lw - self.lw).powi(2)
                - (lh - self.lh).powi(2);
            // d/dx etc. via cx = x + w/2, lw = ln w
            let d_cx = -2.0 * (cx - self.cx);
            let d_cy = -2.0 * (cy - self.cy);
            let d_lw = -2.0 * (lw - self.lw);
            let d_lh = -2.0 * (lh - self.lh);
            let gx = d_cx;
            let gy = d_cy;
            let gw = 0.5 * d_cx + d_lw / b.w;
            let gh = 0.5 * d_cy + d_lh / b.h;
            (score, [gx, gy, gw, gh])
        }
    }

    #[test]
    fn refine_zero_steps_returns_init() {
        let mut stub = QuadraticStub { cx: 5.0, cy: 5.0, lw: 0.0, lh: 0.0 };
        let init = BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let (out, _) = refine_box(&mut stub, &init, 0, 0.25);
        assert_eq!(out, init);
    }

    #[test]
    fn refine_recovers_known_optimum() {
        // maximum at center (5,5), w=h=1 (sigma0 near 1 keeps steps well-scaled)
        let mut stub = QuadraticStub { cx: 5.0, cy: 5.0, lw: 0.0, lh: 0.0 };
        let init = BoundingBox::from_center(6.2, 4.1, 1.4, 0.8).unwrap();
        let (out, score) = refine_box(&mut stub, &init, 50, 0.25);
        let (cx, cy) = out.center();
        assert!(
            (cx - 5.0).abs() < 0.1 && (cy - 5.0).abs() < 0.1,
            "center ({cx},{cy}) did not converge"
        );
        let (_, init_score) = (0, stub.score_and_grad(&init).0);
        assert!(score >= init_score);
    }

    #[test]
    fn multi_candidate_never_scores_below_best_initial() {
        let params = IouHeadParams::init(&small_config(), 6, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let feats = test_features(&mut tape, &mut rng);
        let vars = IouVars::new(&mut tape, &params, false);
        let b0 = BoundingBox::new(12.0, 10.0, 18.0, 14.0).unwrap();
        let modulation = compute_modulation(&mut tape, &vars, &feats, &b0).unwrap();
        let test = test_branch(&mut tape, &vars, &feats);
        let mut scorer = IouScorer { tape: &mut tape, vars, modulation, test };
        let candidates = jitter_proposals(&mut rng, &b0, 6, 0.15, 0.15);
        let best_initial = candidates
            .iter()
            .map(|c| scorer.score_and_grad(c).0)
            .fold(f64::NEG_INFINITY, f64::max);
        let (_, final_score) = refine_candidates(&mut scorer, &candidates, 5, 0.1);
        assert!(final_score >= best_initial - 1e-12);
    }

    #[test]
    fn regression_loss_examples() {
        let mut tape = Tape::new();
        let p = |t: &mut Tape, v: f64| t.constant_scalar(v);
        let a = p(&mut tape, 0.0);
        let b = p(&mut tape, 1.0);
        let l = iou_regression_loss(&mut tape, &[a, b], &[0.0, 1.0]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let l2 = iou_regression_loss(&mut tape, &[a, b], &[1.0, 0.0]).unwrap();
        assert_eq!(tape.scalar(l2), 1.0);
        let c = p(&mut tape, 0.3);
        let l3 = iou_regression_loss(&mut tape, &[c], &[0.5]).unwrap();
        assert!((tape.scalar(l3) - 0.04).abs() < 1e-12);
        assert!(iou_regression_loss(&mut tape, &[], &[]).is_err());
    }
}
