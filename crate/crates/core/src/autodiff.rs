//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operator appends one node to a [`Tape`]. Because a node can only
//! reference nodes created before it, the tape is always in topological
//! order and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{col2im_add, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

/// Smoothing term of the soft dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding on each side of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
        // Unfolded input per batch item; empty for pointwise convolutions.
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        // Geometry of the forward convolution this operator is the adjoint of.
        geom: ConvGeom,
        batch: usize,
        in_channels: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    UpsampleNearest2x {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Softmax {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u8>,
        probs: Vec<f64>,
    },
    SoftDice {
        probs: Var,
        target: Vec<f64>,
        // (intersection, prob mass, target mass) per (batch, class).
        stats: Vec<(f64, f64, f64)>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    visits: usize,
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

    /// Number of nodes visited by the most recent backward pass.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2D cross-correlation with symmetric zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv2d_padded(input, weight, bias, stride, Padding::uniform(padding))
    }

    /// 2D cross-correlation (no kernel flip) with per-side zero padding.
    ///
    /// `input` is `[B,Cin,H,W]`, `weight` is `[Cout,Cin,kh,kw]` and `bias`
    /// is `[Cout]`.
    pub fn conv2d_padded(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be at least 1".into()));
        }
        let ph = h + padding.top + padding.bottom;
        let pw = w + padding.left + padding.right;
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            )));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d: bias shape {:?} does not match {cout} output channels",
                    self.value(bv).shape()
                )));
            }
        }
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad_top: padding.top,
            pad_left: padding.left,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let k = geom.col_rows();
        let n = geom.col_cols();
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0; b * cout * n];
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; b * k * n]
        };
        for bi in 0..b {
            let x_b = &x[bi * geom.image_len()..(bi + 1) * geom.image_len()];
            let out_b = &mut out[bi * cout * n..(bi + 1) * cout * n];
            if pointwise {
                gemm(cout, k, n, wt, false, x_b, false, out_b, false);
            } else {
                let cols_b = &mut cols[bi * k * n..(bi + 1) * k * n];
                im2col(x_b, &geom, cols_b);
                gemm(cout, k, n, wt, false, cols_b, false, out_b, false);
            }
        }
        if let Some(bv) = bias {
            let bias_data = self.value(bv).data();
            for bi in 0..b {
                for (co, &bval) in bias_data.iter().enumerate() {
                    let start = (bi * cout + co) * n;
                    out[start..start + n].iter_mut().for_each(|v| *v += bval);
                }
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        let value = Tensor::new(vec![b, cout, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch: b,
                out_channels: cout,
                cols,
            },
        ))
    }

    /// Transposed convolution (no padding): the adjoint of a strided
    /// `conv2d`. `weight` is `[Cin,Cout,k,k]`; output spatial size is
    /// `(H-1)·stride + k`, which doubles the input for `k = stride = 2`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (wcin, cout, kh, kw) = self.value(weight).dims4()?;
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape(
                "conv_transpose2d: stride and kernel must be positive".into(),
            ));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv_transpose2d: bias shape {:?} does not match {cout} output channels",
                    self.value(bv).shape()
                )));
            }
        }
        let out_h = (h.max(1) - 1) * stride + kh;
        let out_w = (w.max(1) - 1) * stride + kw;
        let geom = ConvGeom {
            channels: cout,
            height: out_h,
            width: out_w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad_top: 0,
            pad_left: 0,
            out_h: h,
            out_w: w,
        };
        let kc = geom.col_rows();
        let n = h * w;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0; b * geom.image_len()];
        let mut cols = vec![0.0; kc * n];
        for bi in 0..b {
            let x_b = &x[bi * cin * n..(bi + 1) * cin * n];
            gemm(kc, cin, n, wt, true, x_b, false, &mut cols, false);
            let out_b = &mut out[bi * geom.image_len()..(bi + 1) * geom.image_len()];
            col2im_add(&cols, &geom, out_b);
        }
        if let Some(bv) = bias {
            let bias_data = self.value(bv).data();
            let plane = out_h * out_w;
            for bi in 0..b {
                for (co, &bval) in bias_data.iter().enumerate() {
                    let start = (bi * cout + co) * plane;
                    out[start..start + plane].iter_mut().for_each(|v| *v += bval);
                }
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        let value = Tensor::new(vec![b, cout, out_h, out_w], out)?;
        Ok(self.push(
            value,
            rg,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                batch: b,
                in_channels: cin,
            },
        ))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first position in
    /// row-major order.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "max_pool2d: spatial dims {h}x{w} must both be even"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.any_grad(&[input]);
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, rg, Op::MaxPool2d { input, argmax }))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let x = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            for y in 0..oh {
                for xo in 0..ow {
                    out[plane * oh * ow + y * ow + xo] = x[plane * h * w + (y / 2) * w + xo / 2];
                }
            }
        }
        let rg = self.any_grad(&[input]);
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, rg, Op::UpsampleNearest2x { input }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * factor).collect(),
        )
        .expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Scale { input, factor })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), rg, Op::Sum { input })
    }

    /// Concatenates along the channel axis; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} and {:?} disagree outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for bi in 0..ba {
            out.extend_from_slice(&xa[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&xb[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Concat { a, b }))
    }

    /// Per-pixel softmax across the channel axis.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        let (b, c, h, w) = x.dims4()?;
        if c < 2 {
            return Err(Error::Shape(format!(
                "softmax_channels needs at least 2 channels, got {c}"
            )));
        }
        let value = Tensor::new(vec![b, c, h, w], softmax_data(x.data(), b, c, h * w))?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, rg, Op::Softmax { input: logits }))
    }

    /// Mean categorical cross-entropy of `[B,C,H,W]` logits against
    /// integer targets laid out `[B,H,W]`, evaluated through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        let x = self.value(logits);
        let (b, c, h, w) = x.dims4()?;
        let plane = h * w;
        if targets.len() != b * plane {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {b}x{h}x{w} logits",
                targets.len()
            )));
        }
        for (i, &t) in targets.iter().enumerate() {
            if t as usize >= c {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    classes: c,
                    sample: i / plane,
                    row: (i % plane) / w,
                    col: i % w,
                });
            }
        }
        let data = x.data();
        let mut probs = vec![0.0; data.len()];
        let mut total = 0.0;
        for bi in 0..b {
            for p in 0..plane {
                let at = |ch: usize| data[(bi * c + ch) * plane + p];
                let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ch| (at(ch) - m).exp()).sum();
                let lse = m + z.ln();
                let t = targets[bi * plane + p] as usize;
                total += lse - at(t);
                for ch in 0..c {
                    probs[(bi * c + ch) * plane + p] = (at(ch) - lse).exp();
                }
            }
        }
        let count = (b * plane).max(1) as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Soft dice loss over foreground classes `1..C`:
    /// `1 − mean_{b,c} (2Σpt + ε)/(Σp + Σt + ε)`.
    ///
    /// `probs` must be a per-pixel distribution over channels (within 1e-6).
    pub fn soft_dice(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(probs);
        let (b, c, h, w) = p.dims4()?;
        if target.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "soft_dice: target {:?} does not match probabilities {:?}",
                target.shape(),
                p.shape()
            )));
        }
        if c < 2 {
            return Err(Error::Shape("soft_dice needs a background and a foreground class".into()));
        }
        let plane = h * w;
        let pd = p.data();
        for bi in 0..b {
            for px in 0..plane {
                let s: f64 = (0..c).map(|ch| pd[(bi * c + ch) * plane + px]).sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Invalid(format!(
                        "soft_dice: probabilities at (sample {bi}, pixel {px}) sum to {s}"
                    )));
                }
            }
        }
        let (stats, loss) = soft_dice_stats(pd, target.data(), b, c, plane);
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftDice {
                probs,
                target: target.data().to_vec(),
                stats,
            },
        ))
    }

    /// Back-propagates from a one-element `loss`, returning the gradient of
    /// every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        self.visits = 0;
        for i in (0..self.nodes.len()).rev() {
            self.visits += 1;
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                out_channels,
                cols,
            } => {
                let cout = *out_channels;
                let k = geom.col_rows();
                let n = geom.col_cols();
                let x = self.value(*input).data();
                if let Some(bv) = bias.filter(|v| self.requires_grad(*v)) {
                    let gb = grad_slot(grads, bv, cout);
                    for bi in 0..*batch {
                        for (co, slot) in gb.iter_mut().enumerate() {
                            let start = (bi * cout + co) * n;
                            *slot += g[start..start + n].iter().sum::<f64>();
                        }
                    }
                }
                if self.requires_grad(*weight) {
                    let gw = grad_slot(grads, *weight, cout * k);
                    for bi in 0..*batch {
                        let g_b = &g[bi * cout * n..(bi + 1) * cout * n];
                        let cols_b = if cols.is_empty() {
                            &x[bi * k * n..(bi + 1) * k * n]
                        } else {
                            &cols[bi * k * n..(bi + 1) * k * n]
                        };
                        gemm(cout, n, k, g_b, false, cols_b, true, gw, true);
                    }
                }
                if self.requires_grad(*input) {
                    let wt = self.value(*weight).data();
                    let img = geom.image_len();
                    let gx = grad_slot(grads, *input, batch * img);
                    let mut dcols = vec![0.0; k * n];
                    for bi in 0..*batch {
                        let g_b = &g[bi * cout * n..(bi + 1) * cout * n];
                        let gx_b = &mut gx[bi * img..(bi + 1) * img];
                        if cols.is_empty() {
                            gemm(k, cout, n, wt, true, g_b, false, gx_b, true);
                        } else {
                            gemm(k, cout, n, wt, true, g_b, false, &mut dcols, false);
                            col2im_add(&dcols, geom, gx_b);
                        }
                    }
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                batch,
                in_channels,
            } => {
                let cin = *in_channels;
                let kc = geom.col_rows();
                let n = geom.col_cols();
                let img = geom.image_len();
                if let Some(bv) = bias.filter(|v| self.requires_grad(*v)) {
                    let plane = geom.height * geom.width;
                    let gb = grad_slot(grads, bv, geom.channels);
                    for bi in 0..*batch {
                        for (co, slot) in gb.iter_mut().enumerate() {
                            let start = (bi * geom.channels + co) * plane;
                            *slot += g[start..start + plane].iter().sum::<f64>();
                        }
                    }
                }
                let need_w = self.requires_grad(*weight);
                let need_x = self.requires_grad(*input);
                if !need_w && !need_x {
                    return;
                }
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let mut dcols = vec![0.0; kc * n];
                for bi in 0..*batch {
                    im2col(&g[bi * img..(bi + 1) * img], geom, &mut dcols);
                    if need_w {
                        let x_b = &x[bi * cin * n..(bi + 1) * cin * n];
                        let gw = grad_slot(grads, *weight, cin * kc);
                        gemm(cin, n, kc, x_b, false, &dcols, true, gw, true);
                    }
                    if need_x {
                        let gx = grad_slot(grads, *input, batch * cin * n);
                        let gx_b = &mut gx[bi * cin * n..(bi + 1) * cin * n];
                        gemm(cin, kc, n, wt, false, &dcols, false, gx_b, true);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.requires_grad(*input) {
                    let len = self.value(*input).len();
                    let gx = grad_slot(grads, *input, len);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::UpsampleNearest2x { input } => {
                if self.requires_grad(*input) {
                    let (b, c, h, w) = self.value(*input).dims4().expect("4-d");
                    let (oh, ow) = (2 * h, 2 * w);
                    let gx = grad_slot(grads, *input, b * c * h * w);
                    for plane in 0..b * c {
                        for y in 0..oh {
                            for xo in 0..ow {
                                gx[plane * h * w + (y / 2) * w + xo / 2] +=
                                    g[plane * oh * ow + y * ow + xo];
                            }
                        }
                    }
                }
            }
            Op::Relu { input } => {
                if self.requires_grad(*input) {
                    let x = self.value(*input).data();
                    let gx = grad_slot(grads, *input, x.len());
                    for ((slot, &xv), &gv) in gx.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *slot += gv;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        let gx = grad_slot(grads, v, g.len());
                        gx.iter_mut().zip(g).for_each(|(s, gv)| *s += gv);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(v) {
                        let o = self.value(other).data();
                        let gx = grad_slot(grads, v, g.len());
                        for ((s, gv), ov) in gx.iter_mut().zip(g).zip(o) {
                            *s += gv * ov;
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.requires_grad(*input) {
                    let gx = grad_slot(grads, *input, g.len());
                    gx.iter_mut().zip(g).for_each(|(s, gv)| *s += gv * factor);
                }
            }
            Op::Sum { input } => {
                if self.requires_grad(*input) {
                    let len = self.value(*input).len();
                    let gx = grad_slot(grads, *input, len);
                    gx.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Concat { a, b } => {
                let (bsz, ca, h, w) = self.value(*a).dims4().expect("4-d");
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let stride = (ca + cb) * plane;
                if self.requires_grad(*a) {
                    let ga = grad_slot(grads, *a, bsz * ca * plane);
                    for bi in 0..bsz {
                        let src = &g[bi * stride..bi * stride + ca * plane];
                        ga[bi * ca * plane..(bi + 1) * ca * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, v)| *s += v);
                    }
                }
                if self.requires_grad(*b) {
                    let gb = grad_slot(grads, *b, bsz * cb * plane);
                    for bi in 0..bsz {
                        let src = &g[bi * stride + ca * plane..(bi + 1) * stride];
                        gb[bi * cb * plane..(bi + 1) * cb * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::Softmax { input } => {
                if self.requires_grad(*input) {
                    let (b, c, h, w) = node.value.dims4().expect("4-d");
                    let plane = h * w;
                    let y = node.value.data();
                    let gx = grad_slot(grads, *input, y.len());
                    for bi in 0..b {
                        for p in 0..plane {
                            let idx = |ch: usize| (bi * c + ch) * plane + p;
                            let dot: f64 = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                            for ch in 0..c {
                                gx[idx(ch)] += y[idx(ch)] * (g[idx(ch)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.requires_grad(*logits) {
                    let (b, c, h, w) = self.value(*logits).dims4().expect("4-d");
                    let plane = h * w;
                    let scale = g[0] / (b * plane).max(1) as f64;
                    let gx = grad_slot(grads, *logits, probs.len());
                    for bi in 0..b {
                        for p in 0..plane {
                            let t = targets[bi * plane + p] as usize;
                            for ch in 0..c {
                                let idx = (bi * c + ch) * plane + p;
                                let onehot = if ch == t { 1.0 } else { 0.0 };
                                gx[idx] += scale * (probs[idx] - onehot);
                            }
                        }
                    }
                }
            }
            Op::SoftDice {
                probs,
                target,
                stats,
            } => {
                if self.requires_grad(*probs) {
                    let (b, c, h, w) = self.value(*probs).dims4().expect("4-d");
                    let plane = h * w;
                    let norm = g[0] / (b * (c - 1)) as f64;
                    let gx = grad_slot(grads, *probs, target.len());
                    for bi in 0..b {
                        for ch in 1..c {
                            let (inter, pm, tm) = stats[bi * (c - 1) + ch - 1];
                            let denom = pm + tm + DICE_SMOOTH;
                            let num = 2.0 * inter + DICE_SMOOTH;
                            let base = (bi * c + ch) * plane;
                            for p in 0..plane {
                                let t = target[base + p];
                                gx[base + p] -= norm * (2.0 * t * denom - num) / (denom * denom);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Numerically stable per-pixel softmax over channels of a `[B,C,P]` buffer.
pub(crate) fn softmax_data(x: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for p in 0..plane {
            let idx = |ch: usize| (bi * c + ch) * plane + p;
            let m = (0..c).map(|ch| x[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (x[idx(ch)] - m).exp();
                out[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[idx(ch)] /= z;
            }
        }
    }
    out
}

fn soft_dice_stats(
    p: &[f64],
    t: &[f64],
    b: usize,
    c: usize,
    plane: usize,
) -> (Vec<(f64, f64, f64)>, f64) {
    let mut stats = Vec::with_capacity(b * (c - 1));
    let mut acc = 0.0;
    for bi in 0..b {
        for ch in 1..c {
            let base = (bi * c + ch) * plane;
            let (mut inter, mut pm, mut tm) = (0.0, 0.0, 0.0);
            for i in base..base + plane {
                inter += p[i] * t[i];
                pm += p[i];
                tm += t[i];
            }
            acc += (2.0 * inter + DICE_SMOOTH) / (pm + tm + DICE_SMOOTH);
            stats.push((inter, pm, tm));
        }
    }
    (stats, 1.0 - acc / (b * (c - 1)) as f64)
}
