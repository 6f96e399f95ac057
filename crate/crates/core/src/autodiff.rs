//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward pass (training episode, tracked frame, box refinement)
//! builds a fresh [`Tape`]. Nodes hold their value eagerly; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients for every node,
//! including leaves, so callers can read gradients with respect to
//! parameters, inputs, or box coordinates alike.
//!
//! The op set is deliberately small: dense 2-D convolution, the channelwise
//! cross-correlation pair used by the discriminative filter, precise ROI
//! pooling with exact box-coordinate gradients, fully connected layers, and
//! the scalar arithmetic needed for exact line search. All math is `f64`.

use ndarray::{ArrayD, Axis, IxDyn};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// tensor * 0-d scalar var
    ScaleByVar(Var, Var),
    /// 0-d / 0-d
    DivScalar(Var, Var),
    Sum(Var),
    Dot(Var, Var),
    LeakyRelu(Var, f64),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
    },
    AvgPool2(Var),
    CorrSame {
        input: Var,
        filter: Var,
    },
    CorrFilterAdjoint {
        input: Var,
        upstream: Var,
    },
    PrPool {
        input: Var,
        bbox: Var,
        out: (usize, usize),
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ChannelAffine {
        input: Var,
        gain: Var,
        bias: Var,
    },
    ChannelScale {
        input: Var,
        vector: Var,
    },
    ConcatC(Vec<Var>),
    Flatten(Var),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if no path to the loss touched it.
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for `var`, materializing zeros of the given shape if absent.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.grads[var.0].as_ref() {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &ArrayD<f64> {
        &self.nodes[var.0].value
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = &self.nodes[var.0].value;
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.sum()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameter or input under study).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (labels, constants).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let rg = self.needs_grad(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let rg = self.needs_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let rg = self.needs_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.needs_grad(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn scale_by_var(&mut self, tensor: Var, scalar: Var) -> Var {
        debug_assert_eq!(self.value(scalar).len(), 1);
        let s = self.scalar(scalar);
        let v = self.value(tensor) * s;
        let rg = self.needs_grad(&[tensor, scalar]);
        self.push(v, Op::ScaleByVar(tensor, scalar), rg)
    }

    pub fn div_scalar(&mut self, a: Var, b: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.scalar(a) / self.scalar(b));
        let rg = self.needs_grad(&[a, b]);
        self.push(v, Op::DivScalar(a, b), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let rg = self.needs_grad(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "dot: shape mismatch");
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x * y)
            .sum::<f64>();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        let rg = self.needs_grad(&[a, b]);
        self.push(v, Op::Dot(a, b), rg)
    }

    /// Sum of squared differences, composed from `sub` + `dot`.
    pub fn sum_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        self.dot(d, d)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { alpha * x });
        let rg = self.needs_grad(&[a]);
        self.push(v, Op::LeakyRelu(a, alpha), rg)
    }

    /// Dense 2-D convolution, stride 1, zero padding `pad`.
    /// input `Cin×H×W`, weight `Cout×Cin×k×k`, bias `Cout`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, pad: usize) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        assert_eq!(x.ndim(), 3, "conv2d: input must be C×H×W");
        assert_eq!(w.ndim(), 4, "conv2d: weight must be Cout×Cin×k×k");
        assert_eq!(
            x.shape()[0],
            w.shape()[1],
            "conv2d: input channels {} != weight expects {}",
            x.shape()[0],
            w.shape()[1]
        );
        let b = bias.map(|b| self.value(b).clone());
        let v = kernels::conv2d(x, w, b.as_ref(), pad);
        let mut vars = vec![input, weight];
        if let Some(b) = bias {
            vars.push(b);
        }
        let rg = self.needs_grad(&vars);
        self.push(v, Op::Conv2d { input, weight, bias, pad }, rg)
    }

    /// 2×2 average pooling, stride 2, floor semantics on odd sizes.
    pub fn avg_pool2(&mut self, input: Var) -> Var {
        let v = kernels::avg_pool2(self.value(input));
        let rg = self.needs_grad(&[input]);
        self.push(v, Op::AvgPool2(input), rg)
    }

    /// Channelwise cross-correlation summed over channels, same-size output
    /// via zero padding. input `C×H×W`, filter `C×k×k` (k odd) → `H×W`.
    pub fn corr_same(&mut self, input: Var, filter: Var) -> Var {
        let x = self.value(input);
        let f = self.value(filter);
        assert_eq!(x.shape()[0], f.shape()[0], "corr_same: channel mismatch");
        assert_eq!(f.shape()[1] % 2, 1, "corr_same: kernel must be odd");
        let v = kernels::corr_same(x, f);
        let rg = self.needs_grad(&[input, filter]);
        self.push(v, Op::CorrSame { input, filter }, rg)
    }

    /// Adjoint of `corr_same` with respect to the filter, as a forward op:
    /// out[c,a,b] = Σ_{p,q} input[c, p+a-c0, q+b-c0] · upstream[p,q].
    /// Used to express the steepest-descent gradient inside the graph.
    pub fn corr_filter_adjoint(&mut self, input: Var, upstream: Var, kernel: usize) -> Var {
        assert_eq!(kernel % 2, 1, "corr_filter_adjoint: kernel must be odd");
        let v = kernels::corr_filter_adjoint(self.value(input), self.value(upstream), kernel);
        let rg = self.needs_grad(&[input, upstream]);
        self.push(v, Op::CorrFilterAdjoint { input, upstream }, rg)
    }

    /// Precise ROI pooling: exact integral average of the bilinearly
    /// interpolated feature surface over each output bin. `bbox` is a length-4
    /// node `[x, y, w, h]` in feature-grid coordinates (samples at integer
    /// positions); gradients flow to both the feature map and the box.
    pub fn prpool(&mut self, input: Var, bbox: Var, out: (usize, usize)) -> Var {
        assert_eq!(self.value(input).ndim(), 3, "prpool: input must be C×H×W");
        assert_eq!(self.value(bbox).len(), 4, "prpool: bbox must be [x,y,w,h]");
        let v = kernels::prpool(self.value(input), self.value(bbox), out);
        let rg = self.needs_grad(&[input, bbox]);
        self.push(v, Op::PrPool { input, bbox, out }, rg)
    }

    /// Fully connected layer: weight `m×n`, input flat `n`, bias `m`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        assert_eq!(x.ndim(), 1, "linear: input must be flat");
        assert_eq!(w.shape()[1], x.len(), "linear: dim mismatch");
        let v = kernels::linear(x, w, self.value(bias));
        let rg = self.needs_grad(&[input, weight, bias]);
        self.push(v, Op::Linear { input, weight, bias }, rg)
    }

    /// Per-channel affine: y[c] = gain[c]·x[c] + bias[c] over C×H×W.
    pub fn channel_affine(&mut self, input: Var, gain: Var, bias: Var) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape()[0], self.value(gain).len(), "channel_affine: gain len");
        assert_eq!(x.shape()[0], self.value(bias).len(), "channel_affine: bias len");
        let v = kernels::channel_affine(x, self.value(gain), self.value(bias));
        let rg = self.needs_grad(&[input, gain, bias]);
        self.push(v, Op::ChannelAffine { input, gain, bias }, rg)
    }

    /// Channelwise modulation: y[c,..] = vector[c] · x[c,..].
    pub fn channel_scale(&mut self, input: Var, vector: Var) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape()[0], self.value(vector).len(), "channel_scale: len");
        let v = kernels::channel_scale(x, self.value(vector));
        let rg = self.needs_grad(&[input, vector]);
        self.push(v, Op::ChannelScale { input, vector }, rg)
    }

    /// Concatenate along axis 0 (channels for maps, plain concat for vectors).
    pub fn concat_c(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_c: empty");
        let first = self.value(parts[0]).shape().to_vec();
        for p in parts {
            let s = self.value(*p).shape();
            assert_eq!(s[1..], first[1..], "concat_c: trailing dims mismatch");
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_c");
        let rg = self.needs_grad(parts);
        self.push(v, Op::ConcatC(parts.to_vec()), rg)
    }

    pub fn flatten(&mut self, input: Var) -> Var {
        let n = self.value(input).len();
        let v = self
            .value(input)
            .clone()
            .into_shape_with_order(IxDyn(&[n]))
            .expect("flatten");
        let rg = self.needs_grad(&[input]);
        self.push(v, Op::Flatten(input), rg)
    }

    /// Backpropagate from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g_out) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g_out);
                continue;
            }
            {
                // Accumulate into parents via a local closure over `grads`.
                let mut acc = |var: Var, g: ArrayD<f64>| match &mut grads[var.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                };
                match &self.nodes[idx].op {
                    Op::Leaf => {}
                    Op::Add(a, b) => {
                        acc(*a, g_out.clone());
                        acc(*b, g_out.clone());
                    }
                    Op::Sub(a, b) => {
                        acc(*a, g_out.clone());
                        acc(*b, -&g_out);
                    }
                    Op::Mul(a, b) => {
                        acc(*a, &g_out * self.value(*b));
                        acc(*b, &g_out * self.value(*a));
                    }
                    Op::Scale(a, c) => acc(*a, &g_out * *c),
                    Op::ScaleByVar(t, s) => {
                        let sv = self.scalar(*s);
                        acc(*t, &g_out * sv);
                        let gs = g_out
                            .iter()
                            .zip(self.value(*t).iter())
                            .map(|(g, x)| g * x)
                            .sum::<f64>();
                        acc(*s, ArrayD::from_elem(IxDyn(&[]), gs));
                    }
                    Op::DivScalar(a, b) => {
                        let g = g_out.sum();
                        let av = self.scalar(*a);
                        let bv = self.scalar(*b);
                        acc(*a, ArrayD::from_elem(IxDyn(&[]), g / bv));
                        acc(*b, ArrayD::from_elem(IxDyn(&[]), -g * av / (bv * bv)));
                    }
                    Op::Sum(a) => {
                        let g = g_out.sum();
                        acc(*a, ArrayD::from_elem(self.value(*a).raw_dim(), g));
                    }
                    Op::Dot(a, b) => {
                        let g = g_out.sum();
                        acc(*a, self.value(*b) * g);
                        acc(*b, self.value(*a) * g);
                    }
                    Op::LeakyRelu(a, alpha) => {
                        let mut g = g_out.clone();
                        g.zip_mut_with(self.value(*a), |gv, &xv| {
                            if xv <= 0.0 {
                                *gv *= alpha;
                            }
                        });
                        acc(*a, g);
                    }
                    Op::Conv2d { input, weight, bias, pad } => {
                        let (gx, gw, gb) = kernels::conv2d_backward(
                            self.value(*input),
                            self.value(*weight),
                            &g_out,
                            *pad,
                        );
                        acc(*input, gx);
                        acc(*weight, gw);
                        if let Some(b) = bias {
                            acc(*b, gb);
                        }
                    }
                    Op::AvgPool2(a) => {
                        acc(*a, kernels::avg_pool2_backward(self.value(*a), &g_out));
                    }
                    Op::CorrSame { input, filter } => {
                        let k = self.value(*filter).shape()[1];
                        // d/dfilter is the filter adjoint; d/dinput is a
                        // per-channel flipped correlation of upstream with filter.
                        acc(
                            *filter,
                            kernels::corr_filter_adjoint(self.value(*input), &g_out, k),
                        );
                        acc(
                            *input,
                            kernels::corr_input_adjoint(self.value(*filter), &g_out),
                        );
                    }
                    Op::CorrFilterAdjoint { input, upstream } => {
                        // out[c,a,b] = Σ_pq input[c,p+a-c0,q+b-c0]·up[p,q]
                        // d/dup[p,q] = Σ_cab g[c,a,b]·input[c,p+a-c0,q+b-c0] = corr_same(input, g)
                        // d/dinput[c,u,v] = Σ_ab g[c,a,b]·up[u-a+c0, v-b+c0]  (per-channel)
                        acc(*upstream, kernels::corr_same(self.value(*input), &g_out));
                        acc(
                            *input,
                            kernels::corr_adjoint_input_grad(self.value(*upstream), &g_out),
                        );
                    }
                    Op::PrPool { input, bbox, out } => {
                        let (gx, gbox) = kernels::prpool_backward(
                            self.value(*input),
                            self.value(*bbox),
                            *out,
                            &g_out,
                        );
                        acc(*input, gx);
                        acc(*bbox, gbox);
                    }
                    Op::Linear { input, weight, bias } => {
                        let (gx, gw, gb) =
                            kernels::linear_backward(self.value(*input), self.value(*weight), &g_out);
                        acc(*input, gx);
                        acc(*weight, gw);
                        acc(*bias, gb);
                    }
                    Op::ChannelAffine { input, gain, bias } => {
                        let (gx, gg, gb) = kernels::channel_affine_backward(
                            self.value(*input),
                            self.value(*gain),
                            &g_out,
                        );
                        acc(*input, gx);
                        acc(*gain, gg);
                        acc(*bias, gb);
                    }
                    Op::ChannelScale { input, vector } => {
                        let (gx, gv) = kernels::channel_scale_backward(
                            self.value(*input),
                            self.value(*vector),
                            &g_out,
                        );
                        acc(*input, gx);
                        acc(*vector, gv);
                    }
                    Op::ConcatC(parts) => {
                        let mut offset = 0;
                        for p in parts {
                            let c = self.value(*p).shape()[0];
                            let slice = g_out
                                .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + c))
                                .to_owned();
                            acc(*p, slice);
                            offset += c;
                        }
                    }
                    Op::Flatten(a) => {
                        let g = g_out
                            .clone()
                            .into_shape_with_order(self.value(*a).raw_dim())
                            .expect("flatten backward");
                        acc(*a, g);
                    }
                }
            }
            grads[idx] = Some(g_out);
        }
        Gradients { grads }
    }
}

/// Raw array kernels shared by forward and backward passes.
mod kernels {
    use ndarray::{ArrayD, ArrayViewD, IxDyn};

    fn pad3(x: &ArrayViewD<f64>, pad: usize) -> (Vec<f64>, usize, usize) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut buf = vec![0.0; c * ph * pw];
        let xs = x.as_slice().expect("contiguous");
        for ci in 0..c {
            for y in 0..h {
                let src = &xs[ci * h * w + y * w..ci * h * w + y * w + w];
                let dst = ci * ph * pw + (y + pad) * pw + pad;
                buf[dst..dst + w].copy_from_slice(src);
            }
        }
        (buf, ph, pw)
    }

    pub fn conv2d(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        bias: Option<&ArrayD<f64>>,
        pad: usize,
    ) -> ArrayD<f64> {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let (xp, ph, pw) = pad3(&x.view(), pad);
        let (oh, ow) = (ph - k + 1, pw - k + 1);
        let mut out = vec![0.0; cout * oh * ow];
        let ws = w.as_slice().expect("contiguous");
        for oc in 0..cout {
            let obase = oc * oh * ow;
            for ic in 0..cin {
                let ibase = ic * ph * pw;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = ws[((oc * cin + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let irow = ibase + (oy + ky) * pw + kx;
                            let orow = obase + oy * ow;
                            let src = &xp[irow..irow + ow];
                            let dst = &mut out[orow..orow + ow];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b[[oc]];
                for v in &mut out[obase..obase + oh * ow] {
                    *v += bv;
                }
            }
        }
        let _ = (h, wd);
        ArrayD::from_shape_vec(IxDyn(&[cout, oh, ow]), out).expect("conv2d shape")
    }

    pub fn conv2d_backward(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        gy: &ArrayD<f64>,
        pad: usize,
    ) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
        let (xp, ph, pw) = pad3(&x.view(), pad);
        let ws = w.as_slice().expect("contiguous");
        let gys = gy.as_slice().expect("contiguous");

        let mut gxp = vec![0.0; cin * ph * pw];
        let mut gw = vec![0.0; cout * cin * k * k];
        let mut gb = vec![0.0; cout];

        for oc in 0..cout {
            let obase = oc * oh * ow;
            gb[oc] = gys[obase..obase + oh * ow].iter().sum();
            for ic in 0..cin {
                let ibase = ic * ph * pw;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * cin + ic) * k + ky) * k + kx;
                        let wv = ws[widx];
                        let mut wacc = 0.0;
                        for oy in 0..oh {
                            let irow = ibase + (oy + ky) * pw + kx;
                            let orow = obase + oy * ow;
                            let g = &gys[orow..orow + ow];
                            let src = &xp[irow..irow + ow];
                            let dst = &mut gxp[irow..irow + ow];
                            for i in 0..ow {
                                wacc += g[i] * src[i];
                                dst[i] += wv * g[i];
                            }
                        }
                        gw[widx] += wacc;
                    }
                }
            }
        }
        // strip padding back off the input gradient
        let mut gx = vec![0.0; cin * h * wd];
        for ic in 0..cin {
            for y in 0..h {
                let src = ic * ph * pw + (y + pad) * pw + pad;
                let dst = ic * h * wd + y * wd;
                gx[dst..dst + wd].copy_from_slice(&gxp[src..src + wd]);
            }
        }
        (
            ArrayD::from_shape_vec(IxDyn(&[cin, h, wd]), gx).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[cout, cin, k, k]), gw).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[cout]), gb).unwrap(),
        )
    }

    pub fn avg_pool2(x: &ArrayD<f64>) -> ArrayD<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                let r0 = ci * h * w + (2 * oy) * w;
                let r1 = r0 + w;
                let orow = ci * oh * ow + oy * ow;
                for ox in 0..ow {
                    let x0 = 2 * ox;
                    out[orow + ox] =
                        0.25 * (xs[r0 + x0] + xs[r0 + x0 + 1] + xs[r1 + x0] + xs[r1 + x0 + 1]);
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap()
    }

    pub fn avg_pool2_backward(x: &ArrayD<f64>, gy: &ArrayD<f64>) -> ArrayD<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
        let gys = gy.as_slice().unwrap();
        let mut gx = vec![0.0; c * h * w];
        for ci in 0..c {
            for oy in 0..oh {
                let r0 = ci * h * w + (2 * oy) * w;
                let r1 = r0 + w;
                let orow = ci * oh * ow + oy * ow;
                for ox in 0..ow {
                    let g = 0.25 * gys[orow + ox];
                    let x0 = 2 * ox;
                    gx[r0 + x0] += g;
                    gx[r0 + x0 + 1] += g;
                    gx[r1 + x0] += g;
                    gx[r1 + x0 + 1] += g;
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), gx).unwrap()
    }

    /// s[p,q] = Σ_{c,a,b} x[c, p+a-c0, q+b-c0] · f[c,a,b], zero outside.
    pub fn corr_same(x: &ArrayD<f64>, f: &ArrayD<f64>) -> ArrayD<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = f.shape()[1];
        let c0 = (k / 2) as isize;
        let xs = x.as_slice().unwrap();
        let fs = f.as_slice().unwrap();
        let mut out = vec![0.0; h * w];
        for ci in 0..c {
            for a in 0..k {
                for b in 0..k {
                    let fv = fs[(ci * k + a) * k + b];
                    if fv == 0.0 {
                        continue;
                    }
                    let dy = a as isize - c0;
                    let dx = b as isize - c0;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    for p in y_lo..y_hi {
                        let iy = (p as isize + dy) as usize;
                        let irow = ci * h * w + iy * w;
                        let orow = p * w;
                        for q in x_lo..x_hi {
                            let ix = (q as isize + dx) as usize;
                            out[orow + q] += fv * xs[irow + ix];
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[h, w]), out).unwrap()
    }

    /// out[c,a,b] = Σ_{p,q} x[c, p+a-c0, q+b-c0] · u[p,q]  (filter-shaped).
    pub fn corr_filter_adjoint(x: &ArrayD<f64>, u: &ArrayD<f64>, k: usize) -> ArrayD<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let c0 = (k / 2) as isize;
        let xs = x.as_slice().unwrap();
        let us = u.as_slice().unwrap();
        let mut out = vec![0.0; c * k * k];
        for ci in 0..c {
            for a in 0..k {
                for b in 0..k {
                    let dy = a as isize - c0;
                    let dx = b as isize - c0;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)) as usize;
                    let mut acc = 0.0;
                    for p in y_lo..y_hi {
                        let iy = (p as isize + dy) as usize;
                        let irow = ci * h * w + iy * w;
                        let urow = p * w;
                        for q in x_lo..x_hi {
                            let ix = (q as isize + dx) as usize;
                            acc += xs[irow + ix] * us[urow + q];
                        }
                    }
                    out[(ci * k + a) * k + b] = acc;
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[c, k, k]), out).unwrap()
    }

    /// Gradient of corr_same w.r.t. its input: per-channel flipped correlation
    /// gx[c,u,v] = Σ_{a,b} f[c,a,b] · up[u-a+c0, v-b+c0].
    pub fn corr_input_adjoint(f: &ArrayD<f64>, up: &ArrayD<f64>) -> ArrayD<f64> {
        let (c, k) = (f.shape()[0], f.shape()[1]);
        let (h, w) = (up.shape()[0], up.shape()[1]);
        let c0 = (k / 2) as isize;
        let fs = f.as_slice().unwrap();
        let us = up.as_slice().unwrap();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for a in 0..k {
                for b in 0..k {
                    let fv = fs[(ci * k + a) * k + b];
                    if fv == 0.0 {
                        continue;
                    }
                    // target index (u,v) receives up[u-dy, v-dx]
                    let dy = a as isize - c0;
                    let dx = b as isize - c0;
                    let u_lo = dy.max(0) as usize;
                    let u_hi = ((h as isize + dy).min(h as isize)) as usize;
                    let v_lo = dx.max(0) as usize;
                    let v_hi = ((w as isize + dx).min(w as isize)) as usize;
                    for u in u_lo..u_hi {
                        let uy = (u as isize - dy) as usize;
                        let urow = uy * w;
                        let orow = ci * h * w + u * w;
                        for v in v_lo..v_hi {
                            let ux = (v as isize - dx) as usize;
                            out[orow + v] += fv * us[urow + ux];
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
    }

    /// Same relation as `corr_input_adjoint` but for the CorrFilterAdjoint op:
    /// gx[c,u,v] = Σ_{a,b} g[c,a,b] · up[u-a+c0, v-b+c0], with per-channel g.
    pub fn corr_adjoint_input_grad(up: &ArrayD<f64>, g: &ArrayD<f64>) -> ArrayD<f64> {
        let (c, k) = (g.shape()[0], g.shape()[1]);
        let (h, w) = (up.shape()[0], up.shape()[1]);
        let c0 = (k / 2) as isize;
        let gs = g.as_slice().unwrap();
        let us = up.as_slice().unwrap();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for a in 0..k {
                for b in 0..k {
                    let gv = gs[(ci * k + a) * k + b];
                    if gv == 0.0 {
                        continue;
                    }
                    let dy = a as isize - c0;
                    let dx = b as isize - c0;
                    let u_lo = dy.max(0) as usize;
                    let u_hi = ((h as isize + dy).min(h as isize)) as usize;
                    let v_lo = dx.max(0) as usize;
                    let v_hi = ((w as isize + dx).min(w as isize)) as usize;
                    for u in u_lo..u_hi {
                        let uy = (u as isize - dy) as usize;
                        let urow = uy * w;
                        let orow = ci * h * w + u * w;
                        for v in v_lo..v_hi {
                            let ux = (v as isize - dx) as usize;
                            out[orow + v] += gv * us[urow + ux];
                        }
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
    }

    /// Integral of the unit hat function from -inf to z.
    fn hat_cdf(z: f64) -> f64 {
        if z <= -1.0 {
            0.0
        } else if z <= 0.0 {
            0.5 * (z + 1.0) * (z + 1.0)
        } else if z <= 1.0 {
            1.0 - 0.5 * (1.0 - z) * (1.0 - z)
        } else {
            1.0
        }
    }

    fn hat(t: f64) -> f64 {
        (1.0 - t.abs()).max(0.0)
    }

    /// Per-axis integrals of hat functions over [lo, hi] for nodes 0..n.
    /// Returns (node range, integral values).
    fn axis_integrals(lo: f64, hi: f64, n: usize) -> (std::ops::Range<usize>, Vec<f64>) {
        let jlo = ((lo - 1.0).floor().max(0.0)) as usize;
        let jhi = (((hi + 1.0).ceil() as isize).min(n as isize - 1)).max(0) as usize;
        if jlo > jhi {
            return (0..0, Vec::new());
        }
        let vals = (jlo..=jhi)
            .map(|j| hat_cdf(hi - j as f64) - hat_cdf(lo - j as f64))
            .collect();
        (jlo..jhi + 1, vals)
    }

    pub fn prpool(x: &ArrayD<f64>, bbox: &ArrayD<f64>, out: (usize, usize)) -> ArrayD<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (p, q) = out;
        let bs = bbox.as_slice().unwrap();
        let (bx, by, bw, bh) = (bs[0], bs[1], bs[2], bs[3]);
        let bin_w = bw / q as f64;
        let bin_h = bh / p as f64;
        let area = bin_w * bin_h;
        let xs = x.as_slice().unwrap();
        let mut outv = vec![0.0; c * p * q];
        for u in 0..p {
            let y1 = by + u as f64 * bin_h;
            let (irange, iy) = axis_integrals(y1, y1 + bin_h, h);
            for v in 0..q {
                let x1 = bx + v as f64 * bin_w;
                let (jrange, ix) = axis_integrals(x1, x1 + bin_w, w);
                for ci in 0..c {
                    let mut s = 0.0;
                    for (ii, i) in irange.clone().enumerate() {
                        let row = ci * h * w + i * w;
                        let mut rs = 0.0;
                        for (jj, j) in jrange.clone().enumerate() {
                            rs += xs[row + j] * ix[jj];
                        }
                        s += rs * iy[ii];
                    }
                    outv[(ci * p + u) * q + v] = s / area;
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[c, p, q]), outv).unwrap()
    }

    pub fn prpool_backward(
        x: &ArrayD<f64>,
        bbox: &ArrayD<f64>,
        out: (usize, usize),
        gy: &ArrayD<f64>,
    ) -> (ArrayD<f64>, ArrayD<f64>) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (p, q) = out;
        let bs = bbox.as_slice().unwrap();
        let (bx, by, bw, bh) = (bs[0], bs[1], bs[2], bs[3]);
        let bin_w = bw / q as f64;
        let bin_h = bh / p as f64;
        let area = bin_w * bin_h;
        let xs = x.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let mut gx = vec![0.0; c * h * w];
        let mut gbox = [0.0f64; 4];

        for u in 0..p {
            let y1 = by + u as f64 * bin_h;
            let y2 = y1 + bin_h;
            let (irange, iy) = axis_integrals(y1, y2, h);
            for v in 0..q {
                let x1 = bx + v as f64 * bin_w;
                let x2 = x1 + bin_w;
                let (jrange, ix) = axis_integrals(x1, x2, w);
                for ci in 0..c {
                    let g = gys[(ci * p + u) * q + v];
                    if g == 0.0 {
                        continue;
                    }
                    let mut s = 0.0;
                    // edge sums: dS/dx1, dS/dx2, dS/dy1, dS/dy2
                    let (mut sx1, mut sx2, mut sy1, mut sy2) = (0.0, 0.0, 0.0, 0.0);
                    for (ii, i) in irange.clone().enumerate() {
                        let row = ci * h * w + i * w;
                        let mut rs = 0.0;
                        let (mut rx1, mut rx2) = (0.0, 0.0);
                        for (jj, j) in jrange.clone().enumerate() {
                            let f = xs[row + j];
                            rs += f * ix[jj];
                            rx1 += f * -hat(x1 - j as f64);
                            rx2 += f * hat(x2 - j as f64);
                            gx[row + j] += g * iy[ii] * ix[jj] / area;
                        }
                        s += rs * iy[ii];
                        sx1 += rx1 * iy[ii];
                        sx2 += rx2 * iy[ii];
                        sy1 += rs * -hat(y1 - i as f64);
                        sy2 += rs * hat(y2 - i as f64);
                    }
                    // V = S/A; A = bin_w*bin_h constant per (w,h) only
                    let ga = g / area;
                    // chain to box params: x1 = bx + v·bw/q, x2 = bx + (v+1)·bw/q
                    gbox[0] += ga * (sx1 + sx2);
                    gbox[1] += ga * (sy1 + sy2);
                    let dw1 = v as f64 / q as f64;
                    let dw2 = (v + 1) as f64 / q as f64;
                    let dh1 = u as f64 / p as f64;
                    let dh2 = (u + 1) as f64 / p as f64;
                    // dV/dw = (dS/dw)/A - V·(dA/dw)/A, dA/dw = bin_h/q
                    gbox[2] += ga * (sx1 * dw1 + sx2 * dw2) - g * s / (area * bw);
                    gbox[3] += ga * (sy1 * dh1 + sy2 * dh2) - g * s / (area * bh);
                }
            }
        }
        (
            ArrayD::from_shape_vec(IxDyn(&[c, h, w]), gx).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[4]), gbox.to_vec()).unwrap(),
        )
    }

    pub fn linear(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let xs = x.as_slice().unwrap();
        let ws = w.as_slice().unwrap();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &ws[i * n..(i + 1) * n];
            out[i] = row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + b[[i]];
        }
        ArrayD::from_shape_vec(IxDyn(&[m]), out).unwrap()
    }

    pub fn linear_backward(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        gy: &ArrayD<f64>,
    ) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let xs = x.as_slice().unwrap();
        let ws = w.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let mut gx = vec![0.0; n];
        let mut gw = vec![0.0; m * n];
        for i in 0..m {
            let g = gys[i];
            let row = &ws[i * n..(i + 1) * n];
            let grow = &mut gw[i * n..(i + 1) * n];
            for j in 0..n {
                gx[j] += g * row[j];
                grow[j] = g * xs[j];
            }
        }
        (
            ArrayD::from_shape_vec(IxDyn(&[n]), gx).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[m, n]), gw).unwrap(),
            gy.clone(),
        )
    }

    pub fn channel_affine(x: &ArrayD<f64>, g: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
        let mut out = x.clone();
        let (c, hw) = (x.shape()[0], x.len() / x.shape()[0]);
        let os = out.as_slice_mut().unwrap();
        for ci in 0..c {
            let (gv, bv) = (g[[ci]], b[[ci]]);
            for v in &mut os[ci * hw..(ci + 1) * hw] {
                *v = gv * *v + bv;
            }
        }
        out
    }

    pub fn channel_affine_backward(
        x: &ArrayD<f64>,
        g: &ArrayD<f64>,
        gy: &ArrayD<f64>,
    ) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
        let (c, hw) = (x.shape()[0], x.len() / x.shape()[0]);
        let xs = x.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let mut gx = vec![0.0; x.len()];
        let mut gg = vec![0.0; c];
        let mut gb = vec![0.0; c];
        for ci in 0..c {
            let gv = g[[ci]];
            let (mut sg, mut sb) = (0.0, 0.0);
            for i in ci * hw..(ci + 1) * hw {
                gx[i] = gv * gys[i];
                sg += gys[i] * xs[i];
                sb += gys[i];
            }
            gg[ci] = sg;
            gb[ci] = sb;
        }
        (
            ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[c]), gg).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap(),
        )
    }

    pub fn channel_scale(x: &ArrayD<f64>, v: &ArrayD<f64>) -> ArrayD<f64> {
        let mut out = x.clone();
        let (c, hw) = (x.shape()[0], x.len() / x.shape()[0]);
        let os = out.as_slice_mut().unwrap();
        for ci in 0..c {
            let sv = v[[ci]];
            for e in &mut os[ci * hw..(ci + 1) * hw] {
                *e *= sv;
            }
        }
        out
    }

    pub fn channel_scale_backward(
        x: &ArrayD<f64>,
        v: &ArrayD<f64>,
        gy: &ArrayD<f64>,
    ) -> (ArrayD<f64>, ArrayD<f64>) {
        let (c, hw) = (x.shape()[0], x.len() / x.shape()[0]);
        let xs = x.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let mut gx = vec![0.0; x.len()];
        let mut gv = vec![0.0; c];
        for ci in 0..c {
            let sv = v[[ci]];
            let mut acc = 0.0;
            for i in ci * hw..(ci + 1) * hw {
                gx[i] = sv * gys[i];
                acc += gys[i] * xs[i];
            }
            gv[ci] = acc;
        }
        (
            ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[c]), gv).unwrap(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar-valued rebuild closure with
    /// respect to one leaf array, compared against tape gradients.
    fn check_grad<F>(shape: &[usize], seed: u64, tol: f64, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let base = randn(&mut rng, shape);

        let mut tape = Tape::new();
        let x = tape.leaf(base.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let g = grads.get(x).expect("no gradient").clone();

        let eps = 1e-5;
        for idx in 0..base.len().min(24) {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[idx] += eps;
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[idx] -= eps;
            let eval = |arr: ArrayD<f64>| {
                let mut t = Tape::new();
                let v = t.leaf(arr);
                let l = build(&mut t, v);
                t.scalar(l)
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * eps);
            let got = g.as_slice().unwrap()[idx];
            let denom = fd.abs().max(got.abs()).max(1e-6);
            assert!(
                (fd - got).abs() / denom < tol,
                "grad mismatch at {idx}: fd={fd} got={got}"
            );
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        check_grad(&[2, 6, 5], 1, 1e-6, move |t, x| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let y = t.conv2d(x, wv, Some(bv), 1);
            let y2 = t.mul(y, y);
            t.sum(y2)
        });
    }

    #[test]
    fn conv2d_weight_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[2, 5, 5]);
        check_grad(&[3, 2, 3, 3], 2, 1e-6, move |t, w| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, w, None, 1);
            t.dot(y, y)
        });
    }

    #[test]
    fn corr_same_matches_bruteforce() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[1, 4, 4]);
        let f = randn(&mut rng, &[1, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fv = tape.constant(f.clone());
        let s = tape.corr_same(xv, fv);
        // nested-loop oracle
        for p in 0..4usize {
            for q in 0..4usize {
                let mut acc = 0.0;
                for a in 0..3isize {
                    for b in 0..3isize {
                        let iy = p as isize + a - 1;
                        let ix = q as isize + b - 1;
                        if iy >= 0 && iy < 4 && ix >= 0 && ix < 4 {
                            acc += x[[0, iy as usize, ix as usize]] * f[[0, a as usize, b as usize]];
                        }
                    }
                }
                let got = tape.value(s)[[p, q]];
                assert!((acc - got).abs() < 1e-9, "({p},{q}): {acc} vs {got}");
            }
        }
    }

    #[test]
    fn corr_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let f = randn(&mut rng, &[2, 3, 3]);
        check_grad(&[2, 6, 6], 5, 1e-6, move |t, x| {
            let fv = t.leaf(f.clone());
            let s = t.corr_same(x, fv);
            t.dot(s, s)
        });
        let x = randn(&mut rng, &[2, 6, 6]);
        check_grad(&[2, 3, 3], 6, 1e-6, move |t, f| {
            let xv = t.leaf(x.clone());
            let s = t.corr_same(xv, f);
            t.dot(s, s)
        });
    }

    #[test]
    fn corr_filter_adjoint_is_true_adjoint() {
        // <corr_same(x, f), u> == <f, corr_filter_adjoint(x, u)>
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[3, 5, 5]);
        let f = randn(&mut rng, &[3, 3, 3]);
        let u = randn(&mut rng, &[5, 5]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let fv = tape.constant(f);
        let uv = tape.constant(u);
        let s = tape.corr_same(xv, fv);
        let lhs = tape.dot(s, uv);
        let adj = tape.corr_filter_adjoint(xv, uv, 3);
        let rhs = tape.dot(fv, adj);
        assert!((tape.scalar(lhs) - tape.scalar(rhs)).abs() < 1e-9);
    }

    #[test]
    fn corr_filter_adjoint_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let u = randn(&mut rng, &[6, 6]);
        check_grad(&[2, 6, 6], 13, 1e-6, move |t, x| {
            let uv = t.leaf(u.clone());
            let g = t.corr_filter_adjoint(x, uv, 3);
            t.dot(g, g)
        });
        let x = randn(&mut rng, &[2, 6, 6]);
        check_grad(&[6, 6], 14, 1e-6, move |t, u| {
            let xv = t.leaf(x.clone());
            let g = t.corr_filter_adjoint(xv, u, 3);
            t.dot(g, g)
        });
    }

    #[test]
    fn prpool_constant_map_gives_constant_bins() {
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[2, 6, 6]), 3.5));
        let b = tape.constant(ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.3, 0.7, 3.1, 2.9]).unwrap());
        let y = tape.prpool(x, b, (2, 2));
        for v in tape.value(y).iter() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn prpool_feature_gradients() {
        let b = vec![1.3, 0.7, 3.1, 2.9];
        check_grad(&[1, 6, 6], 21, 1e-6, move |t, x| {
            let bv = t.constant(ArrayD::from_shape_vec(IxDyn(&[4]), b.clone()).unwrap());
            let y = t.prpool(x, bv, (2, 2));
            t.dot(y, y)
        });
    }

    #[test]
    fn prpool_box_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let x = randn(&mut rng, &[2, 8, 8]);
        // edges chosen off the integer lattice (hat-integral kinks live there)
        let base = vec![1.37, 1.71, 3.66, 2.89];
        let eval = |bb: &[f64]| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let bv = t.leaf(ArrayD::from_shape_vec(IxDyn(&[4]), bb.to_vec()).unwrap());
            let y = t.prpool(xv, bv, (3, 3));
            let l = t.dot(y, y);
            (t.scalar(l), {
                let g = t.backward(l);
                g.get(bv).unwrap().as_slice().unwrap().to_vec()
            })
        };
        let (_, grad) = eval(&base);
        let eps = 1e-5;
        for i in 0..4 {
            let mut p = base.clone();
            p[i] += eps;
            let mut m = base.clone();
            m[i] -= eps;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-5,
                "box grad {i}: fd={fd} got={}",
                grad[i]
            );
        }
    }

    #[test]
    fn linear_and_activation_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let w = randn(&mut rng, &[4, 6]);
        let b = randn(&mut rng, &[4]);
        check_grad(&[6], 32, 1e-6, move |t, x| {
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let y = t.linear(x, wv, bv);
            let a = t.leaky_relu(y, 0.1);
            t.dot(a, a)
        });
    }

    #[test]
    fn concat_affine_scale_pool_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let other = randn(&mut rng, &[3, 4, 4]);
        let gain = randn(&mut rng, &[5]);
        let bias = randn(&mut rng, &[5]);
        let modv = randn(&mut rng, &[5]);
        check_grad(&[2, 4, 4], 42, 1e-6, move |t, x| {
            let o = t.leaf(other.clone());
            let cat = t.concat_c(&[x, o]);
            let g = t.leaf(gain.clone());
            let b = t.leaf(bias.clone());
            let aff = t.channel_affine(cat, g, b);
            let m = t.leaf(modv.clone());
            let sc = t.channel_scale(aff, m);
            let pooled = t.avg_pool2(sc);
            t.dot(pooled, pooled)
        });
    }

    #[test]
    fn scalar_arithmetic_gradients() {
        // exact line-search shaped expression: l = dot(x,x)/(dot(x,y)+c)
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let y = randn(&mut rng, &[5]);
        check_grad(&[5], 52, 1e-6, move |t, x| {
            let yv = t.leaf(y.clone());
            let num = t.dot(x, x);
            let d0 = t.dot(x, yv);
            let c = t.constant_scalar(2.0);
            let den = t.add(d0, c);
            let alpha = t.div_scalar(num, den);
            let scaled = t.scale_by_var(x, alpha);
            let diff = t.sub(scaled, yv);
            t.dot(diff, diff)
        });
    }

    #[test]
    fn grad_accumulates_on_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let y = tape.add(x, x);
        let l = tape.dot(y, y);
        let g = tape.backward(l);
        // l = 4·Σx² → dl/dx = 8x = 16
        for v in g.get(x).unwrap().iter() {
            assert!((v - 16.0).abs() < 1e-12);
        }
    }
}
