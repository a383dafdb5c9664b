//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever it
//! saved for the backward pass. Nodes only reference earlier nodes, so a
//! single reverse sweep visits them in valid topological order.

use super::kernels::{self, Window};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

impl Padding {
    pub fn size(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Reflect(p) => p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2d {
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new(stride: usize, padding: Padding) -> Self {
        Self { stride, padding }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        cfg: Conv2d,
        /// Column matrix `[Cin·Kh·Kw, B·Ho·Wo]` of the (padded) input.
        cols: Vec<T>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        cfg: ConvTranspose2d,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    InstanceNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    L1(Var, Var),
    Bce {
        logits: Var,
        targets: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::ConvTranspose { .. } => "conv2d_transpose",
            Op::Act { .. } => "activation",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather { .. } => "gather",
            Op::L1(..) => "l1_loss",
            Op::Bce { .. } => "bce_from_logits",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => vec![*x, *w, *b],
            Op::InstanceNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::L1(a, b) => vec![*a, *b],
            Op::Act { x, .. }
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Gather { x, .. } => vec![*x],
            Op::Bce { logits, .. } | Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of primitive applications. Confined to one thread; build a
/// fresh tape per forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Registers an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant copy of `v`'s value, cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, cfg: Conv2d) -> Result<Var> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let (cout, cin_w, kh, kw) = self.value(w).dims4()?;
        if cin != cin_w {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, weight expects {cin_w}")));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", self.value(b).shape())));
        }
        let pad = cfg.padding.size();
        let (Some(oh), Some(ow)) = (
            kernels::conv_out_len(h, kh, cfg.stride, pad),
            kernels::conv_out_len(wd, kw, cfg.stride, pad),
        ) else {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} exceeds padded {h}x{wd}")));
        };
        if let Padding::Reflect(p) = cfg.padding {
            if p >= h || p >= wd {
                return Err(Error::shape("conv2d", format!("reflect pad {p} too large for {h}x{wd}")));
            }
        }

        let (win, image_len) = conv_window(cin, h, wd, kh, kw, cfg, oh, ow);
        let positions = oh * ow;
        let ld = batch * positions;
        let rows = win.rows();
        let mut cols = vec![T::zero(); rows * ld];
        let xs = self.value(x).data();
        for i in 0..batch {
            let sample = &xs[i * cin * h * wd..(i + 1) * cin * h * wd];
            match cfg.padding {
                Padding::Reflect(p) if p > 0 => {
                    let padded = kernels::reflect_pad(sample, cin, h, wd, p);
                    debug_assert_eq!(padded.len(), image_len);
                    kernels::im2col(&padded, &win, &mut cols, ld, i * positions);
                }
                _ => kernels::im2col(sample, &win, &mut cols, ld, i * positions),
            }
        }

        let mut out_mat = vec![T::zero(); cout * ld];
        let wm = self.value(w).data();
        T::gemm(cout, rows, ld, wm, rows as isize, 1, &cols, ld as isize, 1, T::zero(), &mut out_mat);
        let bias = self.value(b).data();
        let out = scatter_batch(&out_mat, batch, cout, positions, Some(bias));
        let value = Tensor::from_parts(vec![batch, cout, oh, ow], out);
        self.push(value, Op::Conv { x, w, b, cfg, cols })
    }

    /// Transposed convolution; `w` has layout `[Cin, Cout, Kh, Kw]`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, cfg: ConvTranspose2d) -> Result<Var> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let (cin_w, cout, kh, kw) = self.value(w).dims4()?;
        if cin != cin_w {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input has {cin} channels, weight expects {cin_w}"),
            ));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::shape("conv2d_transpose", format!("bias {:?}", self.value(b).shape())));
        }
        let (Some(oh), Some(ow)) = (
            kernels::conv_transpose_out_len(h, kh, cfg.stride, cfg.padding),
            kernels::conv_transpose_out_len(wd, kw, cfg.stride, cfg.padding),
        ) else {
            return Err(Error::shape("conv2d_transpose", "empty output".to_string()));
        };
        // The transposed conv scatters into the output through the window a
        // forward conv of the output would gather from.
        let win = Window { c: cout, h: oh, w: ow, kh, kw, stride: cfg.stride, pad: cfg.padding, oh: h, ow: wd };
        let positions = h * wd;
        let ld = batch * positions;
        let rows = win.rows();
        let xmat = gather_batch(self.value(x).data(), batch, cin, positions);
        let mut cols = vec![T::zero(); rows * ld];
        let wm = self.value(w).data();
        // cols = Wᵀ · X, W viewed as [Cin, Cout·Kh·Kw]
        T::gemm(rows, cin, ld, wm, 1, rows as isize, &xmat, ld as isize, 1, T::zero(), &mut cols);
        let plane = cout * oh * ow;
        let mut out = vec![T::zero(); batch * plane];
        for i in 0..batch {
            kernels::col2im(&cols, &win, ld, i * positions, &mut out[i * plane..(i + 1) * plane]);
        }
        let bias = self.value(b).data();
        for i in 0..batch {
            for c in 0..cout {
                let s = &mut out[i * plane + c * oh * ow..i * plane + (c + 1) * oh * ow];
                s.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
        let value = Tensor::from_parts(vec![batch, cout, oh, ow], out);
        self.push(value, Op::ConvTranspose { x, w, b, cfg })
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        if let Activation::LeakyRelu(s) = kind {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Invalid(format!("leaky relu slope {s} outside (0,1)")));
            }
        }
        let value = self.value(x).map(|v| apply_activation(kind, v));
        self.push(value, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(Activation::LeakyRelu(slope), x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    /// Per-sample, per-channel normalization over spatial positions.
    pub fn instance_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        if self.value(gain).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(Error::shape("instance_norm", format!("affine terms must have shape [{c}]")));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Invalid(format!("instance norm epsilon {eps} must be positive")));
        }
        let n = h * w;
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(eps);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); batch * c];
        let mut out = vec![T::zero(); xs.len()];
        for bc in 0..batch * c {
            let ch = bc % c;
            let plane = &xs[bc * n..(bc + 1) * n];
            let mean = plane.iter().copied().sum::<T>() / nf;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[bc] = is;
            for i in 0..n {
                let xh = (plane[i] - mean) * is;
                xhat[bc * n + i] = xh;
                out[bc * n + i] = g[ch] * xh + s[ch];
            }
        }
        let value = Tensor::from_parts(vec![batch, c, h, w], out);
        self.push(value, Op::InstanceNorm { x, gain, shift, xhat, inv_std })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = T::from_f64(k);
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Adds a list of scalars left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Empty("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Flat-index selection, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != idx.len() || idx.is_empty() {
            return Err(Error::shape("gather", format!("{} indices for shape {shape:?}", idx.len())));
        }
        let xs = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xs.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", xs.len())));
        }
        let data = idx.iter().map(|&i| xs[i]).collect();
        self.push(Tensor::from_parts(shape, data), Op::Gather { x, idx })
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("l1_loss", a, b)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let s: T = xa.iter().zip(xb).map(|(&p, &q)| (p - q).abs()).sum();
        let value = Tensor::scalar(s / T::from_f64(xa.len() as f64));
        self.push(value, Op::L1(a, b))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// evaluated as `max(l,0) - l·t + ln(1 + e^{-|l|})`.
    pub fn bce_from_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let ls = self.value(logits).data();
        if ls.len() != targets.len() {
            return Err(Error::shape("bce_from_logits", format!("{} logits, {} targets", ls.len(), targets.len())));
        }
        if targets.iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(Error::Invalid("bce targets must be 0 or 1".into()));
        }
        let s: T = ls.iter().zip(targets).map(|(&l, &t)| bce_term(l, t)).sum();
        let value = Tensor::scalar(s / T::from_f64(ls.len() as f64));
        self.push(
            value,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Bce against a constant target for every element.
    pub fn bce_with_target(&mut self, logits: Var, target: bool) -> Result<Var> {
        let t = if target { T::one() } else { T::zero() };
        let targets = vec![t; self.value(logits).numel()];
        self.bce_from_logits(logits, &targets)
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, c] = self.shape(logits)[..] else {
            return Err(Error::shape("softmax_cross_entropy", format!("{:?} is not [N, C]", self.shape(logits))));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("softmax_cross_entropy", format!("labels {labels:?} for [{n}, {c}]")));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &ls[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / z;
            }
            total += z.ln() + max - row[label];
        }
        let value = Tensor::scalar(total / T::from_f64(n as f64));
        self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Back-propagates from the scalar `loss`, replacing any gradients from a
    /// previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, cfg, cols } => {
                let (batch, cin, h, wd) = nodes[x.0].value.dims4().expect("4-D");
                let (cout, _, kh, kw) = nodes[w.0].value.dims4().expect("4-D");
                let (_, _, oh, ow) = node.value.dims4().expect("4-D");
                let positions = oh * ow;
                let ld = batch * positions;
                let (win, _) = conv_window(cin, h, wd, kh, kw, *cfg, oh, ow);
                let rows = win.rows();
                let gmat = gather_batch(g, batch, cout, positions);
                if wants(*w) {
                    let mut dw = vec![T::zero(); cout * rows];
                    T::gemm(cout, ld, rows, &gmat, ld as isize, 1, cols, 1, ld as isize, T::zero(), &mut dw);
                    accumulate(grads, *w, dw);
                }
                if wants(*b) {
                    accumulate(grads, *b, channel_sums(g, batch, cout, positions));
                }
                if wants(*x) {
                    let wm = nodes[w.0].value.data();
                    let mut dcols = vec![T::zero(); rows * ld];
                    T::gemm(rows, cout, ld, wm, 1, rows as isize, &gmat, ld as isize, 1, T::zero(), &mut dcols);
                    let sample = cin * h * wd;
                    let mut dx = vec![T::zero(); batch * sample];
                    for n in 0..batch {
                        let out = &mut dx[n * sample..(n + 1) * sample];
                        match cfg.padding {
                            Padding::Reflect(p) if p > 0 => {
                                let mut dpad = vec![T::zero(); cin * (h + 2 * p) * (wd + 2 * p)];
                                kernels::col2im(&dcols, &win, ld, n * positions, &mut dpad);
                                kernels::reflect_unpad_acc(&dpad, cin, h, wd, p, out);
                            }
                            _ => kernels::col2im(&dcols, &win, ld, n * positions, out),
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::ConvTranspose { x, w, b, cfg } => {
                let (batch, cin, h, wd) = nodes[x.0].value.dims4().expect("4-D");
                let (_, cout, kh, kw) = nodes[w.0].value.dims4().expect("4-D");
                let (_, _, oh, ow) = node.value.dims4().expect("4-D");
                let win = Window { c: cout, h: oh, w: ow, kh, kw, stride: cfg.stride, pad: cfg.padding, oh: h, ow: wd };
                let positions = h * wd;
                let ld = batch * positions;
                let rows = win.rows();
                let plane = cout * oh * ow;
                let mut gcols = vec![T::zero(); rows * ld];
                for n in 0..batch {
                    kernels::im2col(&g[n * plane..(n + 1) * plane], &win, &mut gcols, ld, n * positions);
                }
                if wants(*w) {
                    let xmat = gather_batch(nodes[x.0].value.data(), batch, cin, positions);
                    let mut dw = vec![T::zero(); cin * rows];
                    T::gemm(cin, ld, rows, &xmat, ld as isize, 1, &gcols, 1, ld as isize, T::zero(), &mut dw);
                    accumulate(grads, *w, dw);
                }
                if wants(*b) {
                    accumulate(grads, *b, channel_sums(g, batch, cout, oh * ow));
                }
                if wants(*x) {
                    let wm = nodes[w.0].value.data();
                    let mut dxmat = vec![T::zero(); cin * ld];
                    T::gemm(cin, rows, ld, wm, rows as isize, 1, &gcols, ld as isize, 1, T::zero(), &mut dxmat);
                    accumulate(grads, *x, scatter_batch(&dxmat, batch, cin, positions, None));
                }
            }
            Op::Act { x, kind } => {
                let xs = nodes[x.0].value.data();
                let ys = node.value.data();
                let dx = (0..g.len())
                    .map(|k| g[k] * activation_slope(*kind, xs[k], ys[k]))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::InstanceNorm { x, gain, shift, xhat, inv_std } => {
                let (batch, c, h, w) = nodes[x.0].value.dims4().expect("4-D");
                let n = h * w;
                let nf = T::from_f64(n as f64);
                let gv = nodes[gain.0].value.data();
                let mut dgain = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                let mut dx = vec![T::zero(); batch * c * n];
                for bc in 0..batch * c {
                    let ch = bc % c;
                    let gs = &g[bc * n..(bc + 1) * n];
                    let xh = &xhat[bc * n..(bc + 1) * n];
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gx: T = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    dgain[ch] += sum_gx;
                    dshift[ch] += sum_g;
                    let k = gv[ch] * inv_std[bc] / nf;
                    for i in 0..n {
                        dx[bc * n + i] = k * (nf * gs[i] - sum_g - xh[i] * sum_gx);
                    }
                }
                if wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if wants(*gain) {
                    accumulate(grads, *gain, dgain);
                }
                if wants(*shift) {
                    accumulate(grads, *shift, dshift);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    accumulate(grads, *a, zip_map(g, xb, |d, y| d * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, zip_map(g, xa, |d, x| d * x));
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, g.iter().map(|&v| v * *k).collect()),
            Op::Sum(x) => {
                let n = nodes[x.0].value.numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                accumulate(grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                for (k, &j) in idx.iter().enumerate() {
                    dx[j] += g[k];
                }
                accumulate(grads, *x, dx);
            }
            Op::L1(a, b) => {
                let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let scale = g[0] / T::from_f64(xa.len() as f64);
                let da: Vec<T> = xa
                    .iter()
                    .zip(xb)
                    .map(|(&p, &q)| {
                        let d = p - q;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if wants(*b) {
                    accumulate(grads, *b, da.iter().map(|&v| -v).collect());
                }
                if wants(*a) {
                    accumulate(grads, *a, da);
                }
            }
            Op::Bce { logits, targets } => {
                let ls = nodes[logits.0].value.data();
                let scale = g[0] / T::from_f64(ls.len() as f64);
                let dl = ls
                    .iter()
                    .zip(targets)
                    .map(|(&l, &t)| (sigmoid(l) - t) * scale)
                    .collect();
                accumulate(grads, *logits, dl);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &label) in labels.iter().enumerate() {
                    dl[i * c + label] -= scale;
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_window(
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cfg: Conv2d,
    oh: usize,
    ow: usize,
) -> (Window, usize) {
    match cfg.padding {
        Padding::Reflect(p) if p > 0 => {
            let (ph, pw) = (h + 2 * p, w + 2 * p);
            (
                Window { c: cin, h: ph, w: pw, kh, kw, stride: cfg.stride, pad: 0, oh, ow },
                cin * ph * pw,
            )
        }
        _ => (
            Window { c: cin, h, w, kh, kw, stride: cfg.stride, pad: cfg.padding.size(), oh, ow },
            cin * h * w,
        ),
    }
}

/// `[B, C, P]` → `[C, B·P]`.
fn gather_batch<T: Real>(xs: &[T], batch: usize, c: usize, positions: usize) -> Vec<T> {
    if batch == 1 {
        return xs.to_vec();
    }
    let ld = batch * positions;
    let mut out = vec![T::zero(); c * ld];
    for n in 0..batch {
        for ch in 0..c {
            let src = &xs[(n * c + ch) * positions..(n * c + ch + 1) * positions];
            out[ch * ld + n * positions..ch * ld + (n + 1) * positions].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B·P]` → `[B, C, P]`, optionally adding a per-channel bias.
fn scatter_batch<T: Real>(mat: &[T], batch: usize, c: usize, positions: usize, bias: Option<&[T]>) -> Vec<T> {
    let ld = batch * positions;
    let mut out = vec![T::zero(); batch * c * positions];
    for n in 0..batch {
        for ch in 0..c {
            let src = &mat[ch * ld + n * positions..ch * ld + (n + 1) * positions];
            let dst = &mut out[(n * c + ch) * positions..(n * c + ch + 1) * positions];
            match bias {
                Some(b) => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + b[ch]),
                None => dst.copy_from_slice(src),
            }
        }
    }
    out
}

fn channel_sums<T: Real>(g: &[T], batch: usize, c: usize, positions: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for n in 0..batch {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += g[(n * c + ch) * positions..(n * c + ch + 1) * positions]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
    out
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, &d)| *e += d),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn bce_term<T: Real>(l: T, t: T) -> T {
    l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p()
}

fn apply_activation<T: Real>(kind: Activation, v: T) -> T {
    match kind {
        Activation::Relu => v.max(T::zero()),
        Activation::LeakyRelu(s) => {
            if v > T::zero() {
                v
            } else {
                v * T::from_f64(s)
            }
        }
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => sigmoid(v),
    }
}

fn activation_slope<T: Real>(kind: Activation, x: T, y: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::LeakyRelu(s) => {
            if x > T::zero() {
                T::one()
            } else {
                T::from_f64(s)
            }
        }
        Activation::Tanh => T::one() - y * y,
        Activation::Sigmoid => y * (T::one() - y),
    }
}
