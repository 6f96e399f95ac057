//! The discriminative classifier: Gaussian target labels, filter
//! initialization (conv + precise ROI pooling, averaged over samples),
//! steepest-descent filter optimization with exact line search, the offline
//! classification loss over all recorded iterates, and response maps.
//!
//! The optimization is unrolled on the tape, so the loss is differentiable
//! with respect to every upstream quantity (features, initializer weights).

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::ConvLayer;
use crate::data_model::BoundingBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Gaussian sigma in feature-grid cells; the peak value is 1.
    pub sigma: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { sigma: 1.0 }
    }
}

/// Residual applied to (response, label) inside the classification loss.
/// A single least-squares variant today; the seam exists so a weighted or
/// hinge-like residual can slot in without touching callers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    #[default]
    LeastSquares,
}

fn residual(tape: &mut Tape, response: Var, label: Var, kind: ResidualKind) -> Var {
    match kind {
        ResidualKind::LeastSquares => tape.sub(response, label),
    }
}

/// Gaussian label map: z[p] = exp(−‖p − c‖² / (2σ²)) over an h×w grid.
/// `center` is (x, y) in feature cells (x indexes columns).
pub fn gaussian_label(center: (f64, f64), shape: (usize, usize), config: &LabelConfig) -> ArrayD<f64> {
    let (h, w) = shape;
    let (cx, cy) = center;
    let denom = 2.0 * config.sigma * config.sigma;
    ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| {
        let dy = ix[0] as f64 - cy;
        let dx = ix[1] as f64 - cx;
        (-(dx * dx + dy * dy) / denom).exp()
    })
}

/// Learned part of the model predictor: the initializer's conv layer.
#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub init_conv: ConvLayer,
    pub filter_size: usize,
    pub label: LabelConfig,
    pub lambda: f64,
    pub n_iter: usize,
    pub residual: ResidualKind,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// Filter side k (odd).
    pub filter_size: usize,
    pub label_sigma: f64,
    pub lambda: f64,
    /// Offline steepest-descent iterations (training episodes).
    pub n_iter: usize,
    pub weight_init_seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            filter_size: 5,
            label_sigma: 1.0,
            lambda: 0.01,
            n_iter: 5,
            weight_init_seed: 0,
        }
    }
}

impl PredictorParams {
    pub fn init(config: &PredictorConfig, channels: usize) -> Result<Self> {
        if config.filter_size % 2 == 0 {
            return Err(Error::InvalidConfig("filter_size must be odd".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(config.weight_init_seed);
        Ok(Self {
            init_conv: ConvLayer::init(&mut rng, channels, channels, 3),
            filter_size: config.filter_size,
            label: LabelConfig { sigma: config.label_sigma },
            lambda: config.lambda,
            n_iter: config.n_iter,
            residual: ResidualKind::LeastSquares,
        })
    }

    /// Identity initializer (delta kernel), useful as a neutral baseline.
    pub fn identity(config: &PredictorConfig, channels: usize) -> Result<Self> {
        let mut p = Self::init(config, channels)?;
        let mut w = ArrayD::zeros(IxDyn(&[channels, channels, 3, 3]));
        for c in 0..channels {
            w[[c, c, 1, 1]] = 1.0;
        }
        p.init_conv.weight = w;
        p.init_conv.bias = ArrayD::zeros(IxDyn(&[channels]));
        Ok(p)
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a ArrayD<f64>)) {
        f("init_conv/weight".into(), &self.init_conv.weight);
        f("init_conv/bias".into(), &self.init_conv.bias);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut ArrayD<f64>)) {
        f("init_conv/weight".into(), &mut self.init_conv.weight);
        f("init_conv/bias".into(), &mut self.init_conv.bias);
    }
}

/// The initializer conv layer as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct PredictorVars {
    pub conv_w: Var,
    pub conv_b: Var,
}

impl PredictorVars {
    /// Insert the initializer weights as non-trainable constants.
    pub fn frozen(tape: &mut Tape, params: &PredictorParams) -> Self {
        Self {
            conv_w: tape.constant(params.init_conv.weight.clone()),
            conv_b: tape.constant(params.init_conv.bias.clone()),
        }
    }

    /// Insert the initializer weights as trainable leaves.
    pub fn trainable(tape: &mut Tape, params: &PredictorParams) -> Self {
        Self {
            conv_w: tape.leaf(params.init_conv.weight.clone()),
            conv_b: tape.leaf(params.init_conv.bias.clone()),
        }
    }
}

/// One training sample for filter learning: a feature map on the tape, the
/// target box in feature-grid coordinates, and a memory weight.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: Var,
    /// Target box in feature coordinates (same grid as `features`).
    pub target: BoundingBox,
    pub weight: f64,
}

/// Ordered samples with consistent shapes.
#[derive(Debug, Clone)]
pub struct TrainSamples {
    pub items: Vec<TrainSample>,
}

impl TrainSamples {
    pub fn new(tape: &Tape, items: Vec<TrainSample>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::ShapeMismatch("empty train samples".into()));
        }
        let shape = tape.value(items[0].features).shape().to_vec();
        for s in &items {
            if tape.value(s.features).shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(
                    "train samples differ in feature shape".into(),
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

/// The discriminative filter with its optimization trace.
#[derive(Debug, Clone)]
pub struct FilterModel {
    /// f^(0) .. f^(N_iter)
    pub history: Vec<Var>,
    pub lambda: f64,
}

impl FilterModel {
    pub fn filter(&self) -> Var {
        *self.history.last().expect("non-empty history")
    }

    pub fn f0(&self) -> Var {
        self.history[0]
    }

    pub fn n_iter(&self) -> usize {
        self.history.len() - 1
    }
}

/// Model initializer: conv layer, precise ROI pooling over the target region
/// to k×k, averaged across samples.
pub fn init_filter(
    tape: &mut Tape,
    vars: &PredictorVars,
    samples: &TrainSamples,
    filter_size: usize,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::ShapeMismatch("init_filter: empty samples".into()));
    }
    let mut pooled = Vec::with_capacity(samples.len());
    for s in &samples.items {
        let conv = tape.conv2d(s.features, vars.conv_w, Some(vars.conv_b), 1);
        let bbox = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[4]), vec![s.target.x, s.target.y, s.target.w, s.target.h])
                .unwrap(),
        );
        pooled.push(tape.prpool(conv, bbox, (filter_size, filter_size)));
    }
    let mut acc = pooled[0];
    for p in &pooled[1..] {
        acc = tape.add(acc, *p);
    }
    Ok(tape.scale(acc, 1.0 / samples.len() as f64))
}

/// Steepest descent with exact line search on the regularized least-squares
/// objective L(f) = Σ_j w_j‖x_j ∗ f − z_j‖² + λ‖f‖². Records every iterate;
/// exact line search on a convex quadratic makes the loss non-increasing.
pub fn optimize_filter(
    tape: &mut Tape,
    f0: Var,
    samples: &TrainSamples,
    labels: &[Var],
    lambda: f64,
    n_iter: usize,
) -> Result<FilterModel> {
    if lambda < 0.0 {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    if samples.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimize_filter: {} samples vs {} labels",
            samples.len(),
            labels.len()
        )));
    }
    let k = tape.value(f0).shape()[1];
    for (s, z) in samples.items.iter().zip(labels) {
        let fs = tape.value(s.features).shape();
        let zs = tape.value(*z).shape();
        if fs[0] != tape.value(f0).shape()[0] {
            return Err(Error::ShapeMismatch("filter/feature channel mismatch".into()));
        }
        if zs != &fs[1..] {
            return Err(Error::ShapeMismatch("label/feature spatial mismatch".into()));
        }
    }

    let mut history = vec![f0];
    let mut f = f0;
    for _ in 0..n_iter {
        // gradient g = 2(Σ_j w_j·X_jᵀ(X_j f − z_j) + λ f)
        let mut acc: Option<Var> = None;
        for (s, z) in samples.items.iter().zip(labels) {
            let resp = tape.corr_same(s.features, f);
            let r = tape.sub(resp, *z);
            let adj = tape.corr_filter_adjoint(s.features, r, k);
            let weighted = tape.scale(adj, s.weight);
            acc = Some(match acc {
                Some(a) => tape.add(a, weighted),
                None => weighted,
            });
        }
        let mut g = acc.expect("non-empty samples");
        if lambda != 0.0 {
            let reg = tape.scale(f, lambda);
            g = tape.add(g, reg);
        }
        g = tape.scale(g, 2.0);

        // exact step: α = ½‖g‖² / (Σ_j w_j‖X_j g‖² + λ‖g‖²)
        let gg = tape.dot(g, g);
        if tape.scalar(gg) == 0.0 {
            history.push(f);
            continue;
        }
        let num = tape.scale(gg, 0.5);
        let mut den: Option<Var> = None;
        for s in &samples.items {
            let xg = tape.corr_same(s.features, g);
            let e = tape.dot(xg, xg);
            let e = tape.scale(e, s.weight);
            den = Some(match den {
                Some(d) => tape.add(d, e),
                None => e,
            });
        }
        let mut den = den.expect("non-empty samples");
        if lambda != 0.0 {
            let reg = tape.scale(gg, lambda);
            den = tape.add(den, reg);
        }
        let alpha = tape.div_scalar(num, den);
        let step = tape.scale_by_var(g, alpha);
        f = tape.sub(f, step);
        history.push(f);
    }
    Ok(FilterModel { history, lambda })
}

/// Objective value of one filter on the given samples (for monitoring and
/// monotonicity checks).
pub fn filter_objective(
    tape: &mut Tape,
    f: Var,
    samples: &TrainSamples,
    labels: &[Var],
    lambda: f64,
) -> f64 {
    let mut total = 0.0;
    for (s, z) in samples.items.iter().zip(labels) {
        let resp = tape.corr_same(s.features, f);
        let r = tape.sub(resp, *z);
        let sq = tape.dot(r, r);
        total += s.weight * tape.scalar(sq);
    }
    let ff = tape.dot(f, f);
    total + lambda * tape.scalar(ff)
}

/// Response map s = x ∗ f: channelwise cross-correlation summed over
/// channels, same-size output via zero padding.
pub fn compute_response(tape: &mut Tape, x: Var, f: Var) -> Result<Var> {
    if tape.value(x).shape()[0] != tape.value(f).shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "compute_response: {} feature channels vs {} filter channels",
            tape.value(x).shape()[0],
            tape.value(f).shape()[0]
        )));
    }
    Ok(tape.corr_same(x, f))
}

/// Offline classification loss: the per-iterate squared residual summed over
/// test samples, averaged with normalizer max(n_iter, 1) (the sum runs over
/// n_iter+1 iterates including f^(0)).
pub fn classification_loss(
    tape: &mut Tape,
    model: &FilterModel,
    test_features: &[Var],
    labels: &[Var],
    n_iter_norm: usize,
    kind: ResidualKind,
) -> Result<Var> {
    if test_features.is_empty() {
        return Err(Error::ShapeMismatch("classification_loss: empty test set".into()));
    }
    let responses: Vec<Vec<Var>> = model
        .history
        .iter()
        .map(|f| {
            test_features
                .iter()
                .map(|x| compute_response(tape, *x, *f))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    classification_loss_from_responses(tape, &responses, labels, n_iter_norm, kind)
}

/// Same loss from precomputed per-iterate responses (used by response-level
/// fusion, where each response is a sum over per-modality filters).
pub fn classification_loss_from_responses(
    tape: &mut Tape,
    per_iterate_responses: &[Vec<Var>],
    labels: &[Var],
    n_iter_norm: usize,
    kind: ResidualKind,
) -> Result<Var> {
    if per_iterate_responses.is_empty() {
        return Err(Error::ShapeMismatch("classification_loss: empty history".into()));
    }
    let mut total: Option<Var> = None;
    for responses in per_iterate_responses {
        if responses.len() != labels.len() {
            return Err(Error::ShapeMismatch(
                "classification_loss: responses/labels length mismatch".into(),
            ));
        }
        for (s, z) in responses.iter().zip(labels) {
            let r = residual(tape, *s, *z, kind);
            let sq = tape.dot(r, r);
            total = Some(match total {
                Some(t) => tape.add(t, sq),
                None => sq,
            });
        }
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, 1.0 / n_iter_norm.max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-scale..scale))
    }

    #[test]
    fn gaussian_label_peak_and_sigma_point() {
        let cfg = LabelConfig { sigma: 2.0 };
        let z = gaussian_label((3.0, 3.0), (7, 7), &cfg);
        assert_eq!(z[[3, 3]], 1.0);
        // value at distance sigma from center is exp(-1/2)
        let z1 = gaussian_label((3.0, 3.0), (7, 7), &LabelConfig { sigma: 1.0 });
        assert!((z1[[3, 4]] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((z1[[2, 3]] - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_label_sum_matches_brute_force() {
        let cfg = LabelConfig { sigma: 1.0 };
        let z = gaussian_label((5.0, 5.0), (11, 11), &cfg);
        let mut expect = 0.0;
        for y in 0..11 {
            for x in 0..11 {
                let dy = y as f64 - 5.0;
                let dx = x as f64 - 5.0;
                expect += (-(dx * dx + dy * dy) / 2.0).exp();
            }
        }
        assert!((z.sum() - expect).abs() < 1e-12);
    }

    fn constant_samples(tape: &mut Tape, c: usize, hw: usize, v: f64, n: usize) -> TrainSamples {
        let items = (0..n)
            .map(|_| TrainSample {
                features: tape.constant(ArrayD::from_elem(IxDyn(&[c, hw, hw]), v)),
                target: BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap(),
                weight: 1.0,
            })
            .collect();
        TrainSamples::new(tape, items).unwrap()
    }

    #[test]
    fn init_filter_constant_features_identity_conv() {
        let cfg = PredictorConfig { filter_size: 3, ..PredictorConfig::default() };
        let params = PredictorParams::identity(&cfg, 4).unwrap();
        let mut tape = Tape::new();
        let vars = PredictorVars::frozen(&mut tape, &params);
        let samples = constant_samples(&mut tape, 4, 8, 2.5, 1);
        let f0 = init_filter(&mut tape, &vars, &samples, 3).unwrap();
        assert_eq!(tape.value(f0).shape(), &[4, 3, 3]);
        // interior box: pooled averages of constant 2.5 stay 2.5
        for v in tape.value(f0).iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn init_filter_mean_is_idempotent_for_identical_samples() {
        let cfg = PredictorConfig { filter_size: 5, ..PredictorConfig::default() };
        let params = PredictorParams::init(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let vars = PredictorVars::frozen(&mut tape, &params);
        let one = constant_samples(&mut tape, 3, 10, 1.7, 1);
        let two = constant_samples(&mut tape, 3, 10, 1.7, 2);
        let f_one = init_filter(&mut tape, &vars, &one, 5).unwrap();
        let f_two = init_filter(&mut tape, &vars, &two, 5).unwrap();
        let a = tape.value(f_one).clone();
        let b = tape.value(f_two).clone();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn init_filter_shape_contract() {
        let cfg = PredictorConfig { filter_size: 5, ..PredictorConfig::default() };
        let params = PredictorParams::init(&cfg, 64).unwrap();
        let mut tape = Tape::new();
        let vars = PredictorVars::frozen(&mut tape, &params);
        let samples = constant_samples(&mut tape, 64, 8, 0.3, 1);
        let f0 = init_filter(&mut tape, &vars, &samples, 5).unwrap();
        assert_eq!(tape.value(f0).shape(), &[64, 5, 5]);
    }

    #[test]
    fn optimize_zero_iterations_returns_f0() {
        let mut tape = Tape::new();
        let samples = constant_samples(&mut tape, 2, 6, 0.4, 1);
        let z = gaussian_label((3.0, 3.0), (6, 6), &LabelConfig::default());
        let zv = tape.constant(z);
        let f0 = tape.constant(ArrayD::from_elem(IxDyn(&[2, 3, 3]), 0.1));
        let model = optimize_filter(&mut tape, f0, &samples, &[zv], 0.01, 0).unwrap();
        assert_eq!(model.history.len(), 1);
        assert_eq!(tape.value(model.filter()), tape.value(f0));
    }

    #[test]
    fn optimize_scalar_least_squares_one_exact_step() {
        // x=[2], z=[4], λ=0, f0=0: one exact step lands on f=2, loss 0
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1]), 2.0));
        let samples = TrainSamples::new(
            &tape,
            vec![TrainSample {
                features: x,
                target: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                weight: 1.0,
            }],
        )
        .unwrap();
        let z = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1]), 4.0));
        let f0 = tape.constant(ArrayD::zeros(IxDyn(&[1, 1, 1])));
        let model = optimize_filter(&mut tape, f0, &samples, &[z], 0.0, 1).unwrap();
        let f = tape.value(model.filter())[[0, 0, 0]];
        assert!((f - 2.0).abs() < 1e-12, "filter {f}");
        let loss = filter_objective(&mut tape, model.filter(), &samples, &[z], 0.0);
        assert!(loss < 1e-20);
    }

    #[test]
    fn optimize_loss_is_monotone_nonincreasing() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for inst in 0..8 {
            let mut tape = Tape::new();
            let n_samples = 1 + inst % 3;
            let mut items = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..n_samples {
                let x = tape.constant(randn(&mut rng, &[3, 8, 8], 0.5));
                items.push(TrainSample {
                    features: x,
                    target: BoundingBox::new(2.0, 2.0, 3.0, 3.0).unwrap(),
                    weight: rng.gen_range(0.2..1.0),
                });
                labels.push(tape.constant(gaussian_label(
                    (rng.gen_range(1.0..6.0), rng.gen_range(1.0..6.0)),
                    (8, 8),
                    &LabelConfig::default(),
                )));
            }
            let samples = TrainSamples::new(&tape, items).unwrap();
            let f0 = tape.constant(randn(&mut rng, &[3, 3, 3], 0.5));
            let model = optimize_filter(&mut tape, f0, &samples, &labels, 0.05, 12).unwrap();
            let losses: Vec<f64> = model
                .history
                .iter()
                .map(|f| filter_objective(&mut tape, *f, &samples, &labels, 0.05))
                .collect();
            for w in losses.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-12,
                    "instance {inst}: loss increased {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    /// Dense regularized least-squares oracle: unfold the correlation into an
    /// explicit matrix and solve the normal equations by Gaussian elimination.
    fn closed_form_min_loss(
        xs: &[ArrayD<f64>],
        zs: &[ArrayD<f64>],
        k: usize,
        lambda: f64,
    ) -> f64 {
        let c = xs[0].shape()[0];
        let (h, w) = (xs[0].shape()[1], xs[0].shape()[2]);
        let dim = c * k * k;
        let c0 = (k / 2) as isize;
        // rows of X: one per (sample, position)
        let mut xtx = vec![0.0; dim * dim];
        let mut xtz = vec![0.0; dim];
        let mut zz = 0.0;
        for (x, z) in xs.iter().zip(zs) {
            for p in 0..h {
                for q in 0..w {
                    let mut rowvec = vec![0.0; dim];
                    for ci in 0..c {
                        for a in 0..k {
                            for b in 0..k {
                                let iy = p as isize + a as isize - c0;
                                let ix = q as isize + b as isize - c0;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    rowvec[(ci * k + a) * k + b] =
                                        x[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    let zv = z[[p, q]];
                    zz += zv * zv;
                    for i in 0..dim {
                        if rowvec[i] == 0.0 {
                            continue;
                        }
                        xtz[i] += rowvec[i] * zv;
                        for j in 0..dim {
                            xtx[i * dim + j] += rowvec[i] * rowvec[j];
                        }
                    }
                }
            }
        }
        for i in 0..dim {
            xtx[i * dim + i] += lambda;
        }
        // Gaussian elimination with partial pivoting
        let mut a = xtx;
        let mut bvec = xtz.clone();
        for col in 0..dim {
            let mut piv = col;
            for r in col + 1..dim {
                if a[r * dim + col].abs() > a[piv * dim + col].abs() {
                    piv = r;
                }
            }
            if piv != col {
                for j in 0..dim {
                    a.swap(col * dim + j, piv * dim + j);
                }
                bvec.swap(col, piv);
            }
            let d = a[col * dim + col];
            for r in col + 1..dim {
                let factor = a[r * dim + col] / d;
                if factor == 0.0 {
                    continue;
                }
                for j in col..dim {
                    a[r * dim + j] -= factor * a[col * dim + j];
                }
                bvec[r] -= factor * bvec[col];
            }
        }
        let mut f = vec![0.0; dim];
        for col in (0..dim).rev() {
            let mut s = bvec[col];
            for j in col + 1..dim {
                s -= a[col * dim + j] * f[j];
            }
            f[col] = s / a[col * dim + col];
        }
        // L* = zᵀz − fᵀXᵀz − fᵀ(XᵀX+λI)f + 2·... compute directly:
        // L(f) = ‖Xf − z‖² + λ‖f‖² = zᵀz − 2 fᵀXᵀz + fᵀ(XᵀX + λI) f
        let mut quad = 0.0;
        // recompute XᵀX+λI was destroyed; rebuild cheaply via the residual identity:
        // at the optimum, (XᵀX+λI) f = Xᵀz, so L* = zᵀz − fᵀ Xᵀz
        for i in 0..dim {
            quad += f[i] * xtz[i];
        }
        zz - quad
    }

    #[test]
    fn optimizer_reaches_closed_form_minimum() {
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        for _ in 0..3 {
            let xs: Vec<ArrayD<f64>> = (0..2).map(|_| randn(&mut rng, &[4, 8, 8], 0.1)).collect();
            let zs: Vec<ArrayD<f64>> = (0..2)
                .map(|_| {
                    gaussian_label(
                        (rng.gen_range(2.0..6.0), rng.gen_range(2.0..6.0)),
                        (8, 8),
                        &LabelConfig::default(),
                    )
                })
                .collect();
            let expected = closed_form_min_loss(&xs, &zs, 3, 0.1);

            let mut tape = Tape::new();
            let items = xs
                .iter()
                .map(|x| TrainSample {
                    features: tape.constant(x.clone()),
                    target: BoundingBox::new(2.0, 2.0, 3.0, 3.0).unwrap(),
                    weight: 1.0,
                })
                .collect();
            let samples = TrainSamples::new(&tape, items).unwrap();
            let labels: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
            let f0 = tape.constant(ArrayD::zeros(IxDyn(&[4, 3, 3])));
            let model = optimize_filter(&mut tape, f0, &samples, &labels, 0.1, 50).unwrap();
            let reached = filter_objective(&mut tape, model.filter(), &samples, &labels, 0.1);
            assert!(
                (reached - expected) / expected.max(1e-12) < 1e-3,
                "SD {reached} vs closed form {expected}"
            );
            assert!(reached >= expected - 1e-9, "below the optimum?");
        }
    }

    #[test]
    fn response_delta_filter_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[1, 5, 5], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut delta = ArrayD::zeros(IxDyn(&[1, 3, 3]));
        delta[[0, 1, 1]] = 1.0;
        let fv = tape.constant(delta);
        let s = compute_response(&mut tape, xv, fv).unwrap();
        for y in 0..5 {
            for xx in 0..5 {
                assert_eq!(tape.value(s)[[y, xx]], x[[0, y, xx]]);
            }
        }
    }

    #[test]
    fn response_ones_times_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 5, 5]), 1.0));
        let f = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1]), 1.0));
        let s = compute_response(&mut tape, x, f).unwrap();
        assert!(tape.value(s).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn response_channel_mismatch_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 5, 5])));
        let f = tape.constant(ArrayD::zeros(IxDyn(&[3, 3, 3])));
        assert!(compute_response(&mut tape, x, f).is_err());
    }

    #[test]
    fn response_is_linear_in_filter() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[2, 6, 6], 1.0);
        let f1 = randn(&mut rng, &[2, 3, 3], 1.0);
        let f2 = randn(&mut rng, &[2, 3, 3], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let f1v = tape.constant(f1.clone());
        let f2v = tape.constant(f2.clone());
        let fsum = tape.add(f1v, f2v);
        let s1 = compute_response(&mut tape, xv, f1v).unwrap();
        let s2 = compute_response(&mut tape, xv, f2v).unwrap();
        let ssum = compute_response(&mut tape, xv, fsum).unwrap();
        let s12 = tape.add(s1, s2);
        for (a, b) in tape.value(ssum).iter().zip(tape.value(s12).iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn classification_loss_examples() {
        // perfect responses → 0
        let mut tape = Tape::new();
        let z = tape.constant(gaussian_label((2.0, 2.0), (5, 5), &LabelConfig::default()));
        let resp = z;
        let l = classification_loss_from_responses(
            &mut tape,
            &[vec![resp], vec![resp]],
            &[z],
            2,
            ResidualKind::LeastSquares,
        )
        .unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        // two iterates with residual norms² 4 and 2, N_iter = 2 → (4+2)/2 = 3
        let zero = tape.constant(ArrayD::zeros(IxDyn(&[1, 4])));
        let r1 = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![2.0, 0.0, 0.0, 0.0]).unwrap());
        let r2 = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        let l2 = classification_loss_from_responses(
            &mut tape,
            &[vec![r1], vec![r2]],
            &[zero],
            2,
            ResidualKind::LeastSquares,
        )
        .unwrap();
        assert!((tape.scalar(l2) - 3.0).abs() < 1e-12);

        // history of length 1: loss equals that iterate's summed squared residual
        let l3 = classification_loss_from_responses(
            &mut tape,
            &[vec![r1]],
            &[zero],
            0,
            ResidualKind::LeastSquares,
        )
        .unwrap();
        assert!((tape.scalar(l3) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_wrt_features_matches_finite_differences() {
        // unrolled optimizer: d L_cls / d(train features) via the tape
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let base = randn(&mut rng, &[2, 6, 6], 0.4);
        let test_feat = randn(&mut rng, &[2, 6, 6], 0.4);
        let z_train = gaussian_label((3.0, 2.0), (6, 6), &LabelConfig::default());
        let z_test = gaussian_label((2.0, 3.0), (6, 6), &LabelConfig::default());

        let eval = |feat: &ArrayD<f64>| -> (f64, Option<ArrayD<f64>>) {
            let mut tape = Tape::new();
            let x = tape.leaf(feat.clone());
            let samples = TrainSamples::new(
                &tape,
                vec![TrainSample {
                    features: x,
                    target: BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap(),
                    weight: 1.0,
                }],
            )
            .unwrap();
            let zt = tape.constant(z_train.clone());
            let f0 = tape.constant(ArrayD::from_elem(IxDyn(&[2, 3, 3]), 0.05));
            let model = optimize_filter(&mut tape, f0, &samples, &[zt], 0.05, 2).unwrap();
            let xtest = tape.constant(test_feat.clone());
            let zv = tape.constant(z_test.clone());
            let l = classification_loss(
                &mut tape,
                &model,
                &[xtest],
                &[zv],
                model.n_iter(),
                ResidualKind::LeastSquares,
            )
            .unwrap();
            let g = tape.backward(l);
            (tape.scalar(l), g.get(x).cloned())
        };

        let (_, grad) = eval(&base);
        let grad = grad.expect("features get a gradient through the unrolled SD");
        let eps = 1e-4;
        let mut rng2 = ChaCha12Rng::seed_from_u64(56);
        for _ in 0..10 {
            let idx = rng2.gen_range(0..base.len());
            let mut p = base.clone();
            p.as_slice_mut().unwrap()[idx] += eps;
            let mut m = base.clone();
            m.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * eps);
            let got = grad.as_slice().unwrap()[idx];
            let denom = fd.abs().max(got.abs()).max(1e-8);
            assert!(
                (fd - got).abs() / denom < 1e-3,
                "feature grad {idx}: fd={fd} got={got}"
            );
        }
    }
}
