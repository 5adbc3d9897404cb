//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every op appends a node holding its output value plus whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients. Parameters enter the tape by name through
//! [`Tape::param`] so their gradients can be routed back to the owner.

use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance over batch and space.
    pub var: Vec<T>,
    /// Number of values each statistic was taken over.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        out_channels: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        in_channels: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MaskMul {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    BiasAdd {
        x: Var,
        bias: Var,
    },
    Softmax {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Combine {
        terms: Vec<(Var, T)>,
    },
    WeightedCe {
        p: Var,
        labels: Vec<u8>,
        weights: Vec<T>,
    },
    Dice {
        p: Var,
        labels: Vec<u8>,
        class_weights: Vec<T>,
        numerator: T,
        denominator: T,
    },
    GroupLasso {
        w: Var,
        groups: usize,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Probability floor inside the log of the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Differentiable input without a name.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// Differentiable named parameter. The gradient is retrievable with
    /// [`Tape::param_grads`] after [`Tape::backward`].
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let v = self.push(t.detached(), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every named parameter touched by this tape. A
    /// parameter bound twice has its gradients summed.
    pub fn param_grads(&self) -> HashMap<String, Vec<T>> {
        let mut out: HashMap<String, Vec<T>> = HashMap::new();
        for (name, v) in &self.params {
            if let Some(g) = self.grad(*v) {
                match out.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => {
                        out.insert(name.clone(), g.to_vec());
                    }
                }
            }
        }
        out
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let [b, c, h, wd] = self.value(x).dims4("conv2d")?;
        let [o, wc, kh, kw] = self.value(w).dims4("conv2d")?;
        if c != wc {
            return Err(Error::dim(
                "conv2d",
                format!("input channels (axis 1) = {c} but kernel expects {wc} (axis 1)"),
            ));
        }
        let geom = ConvGeometry::new(c, h, wd, kh, kw, stride, padding)?;
        let out = kernels::conv2d_forward(self.value(x).data(), b, &geom, self.value(w).data(), o);
        let value = Tensor::new(vec![b, o, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                geom,
                out_channels: o,
            },
            rg,
        ))
    }

    /// Transposed convolution with kernel layout `[Cin, Cout, kh, kw]`.
    /// Output size is `(H-1)*stride - 2*padding + kh + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let [b, ci, h, wd] = self.value(x).dims4("conv_transpose2d")?;
        let [wci, co, kh, kw] = self.value(w).dims4("conv_transpose2d")?;
        if ci != wci {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input channels (axis 1) = {ci} but kernel expects {wci} (axis 0)"),
            ));
        }
        if stride == 0 || output_padding >= stride {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("output_padding {output_padding} must be below stride {stride}"),
            ));
        }
        let oh = kernels::conv_transpose_out(h, kh, stride, padding, output_padding);
        let ow = kernels::conv_transpose_out(wd, kw, stride, padding, output_padding);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(Error::dim("conv_transpose2d", "padding exceeds output size")),
        };
        let geom = ConvGeometry::new(co, oh, ow, kh, kw, stride, padding)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let out = kernels::conv_transpose_forward(self.value(x).data(), b, ci, &geom, self.value(w).data());
        let value = Tensor::new(vec![b, co, oh, ow], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            value,
            Op::ConvTranspose {
                x,
                w,
                geom,
                in_channels: ci,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let dims = self.value(x).dims4("max_pool2d")?;
        let [b, c, h, w] = dims;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::dim(
                "max_pool2d",
                format!("spatial dims {h}x{w} (axes 2,3) not divisible by window {window}"),
            ));
        }
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), dims, window);
        let value = Tensor::new(vec![b, c, h / window, w / window], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "add",
                format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product with a constant mask of the same length.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let src = self.value(x);
        if mask.len() != src.len() {
            return Err(Error::dim(
                "mask_mul",
                format!("mask has {} entries, tensor {:?}", mask.len(), src.shape()),
            ));
        }
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskMul { x, mask }, rg))
    }

    /// Concatenation of 4-d tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let [b, _, h, w] = self.value(first).dims4("concat")?;
        let mut total = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = self.value(p).dims4("concat")?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::dim(
                    "concat",
                    format!("axes 0,2,3 must agree: {:?} vs {:?}", [b, h, w], [pb, ph, pw]),
                ));
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(vec![b, total, h, w], out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Selects input channels by index (repeats allowed).
    pub fn gather_channels(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("gather_channels")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::dim(
                "gather_channels",
                format!("channel index {bad} out of range for {c} channels (axis 1)"),
            ));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * indices.len() * hw);
        for bi in 0..b {
            for &ci in indices {
                out.extend_from_slice(&src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]);
            }
        }
        let value = Tensor::new(vec![b, indices.len(), h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Per-channel normalization followed by `gamma * xhat + beta`.
    ///
    /// With `stats = None` the batch's own mean and variance are used (and
    /// returned); with `Some((mean, var))` those fixed statistics are used.
    pub fn scale_shift(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [b, c, h, w] = self.value(x).dims4("scale_shift")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != c {
                return Err(Error::dim(
                    "scale_shift",
                    format!("{name} has {} entries for {c} channels", self.value(v).len()),
                ));
            }
        }
        let hw = h * w;
        let n = b * hw;
        let eps = T::from_f64_lossy(eps);
        let src = self.value(x).data();
        let (mean, var, batch) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("scale_shift", "running statistics length mismatch"));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let nt = T::from_usize(n).expect("count fits");
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let plane = |bi: usize| &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let s: T = (0..b).map(|bi| kernels::sum(plane(bi))).sum();
                    let m = s / nt;
                    let q: T = (0..b).map(|bi| kernels::sq_dev_sum(plane(bi), m)).sum();
                    mean[ci] = m;
                    var[ci] = q / nt;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&src[r]) {
                    *xh = (v - mean[ci]) * inv_std[ci];
                    *o = g[ci] * *xh + be[ci];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: batch,
            },
            rg,
        );
        let stats = batch.then_some(BatchStats { mean, var, count: n });
        Ok((v, stats))
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("bias_add")?;
        if self.value(bias).len() != c {
            return Err(Error::dim("bias_add", "bias length differs from channel count"));
        }
        let hw = h * w;
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v += bv[ci]);
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::BiasAdd { x, bias }, rg))
    }

    /// Softmax over the channel axis of a `[B,L,H,W]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [b, l, h, w] = self.value(x).dims4("softmax_channels")?;
        if l < 2 {
            return Err(Error::dim("softmax_channels", format!("need at least 2 channels, got {l}")));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            let base = bi * l * hw;
            for p in 0..hw {
                let mut m = T::neg_infinity();
                for li in 0..l {
                    m = m.max(src[base + li * hw + p]);
                }
                let mut s = T::zero();
                for li in 0..l {
                    let e = (src[base + li * hw + p] - m).exp();
                    out[base + li * hw + p] = e;
                    s += e;
                }
                for li in 0..l {
                    out[base + li * hw + p] = out[base + li * hw + p] / s;
                }
            }
        }
        let value = Tensor::new(vec![b, l, h, w], out)?;
        if !value.all_finite() {
            return Err(Error::NonFinite("softmax_channels output".into()));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Linear combination of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::dim("combine", format!("term of shape {:?} is not scalar", t.shape())));
            }
            s += c * t.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Combine {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// `-sum_i w_i * log(max(p[r_i, i], 1e-12))` over a probability map
    /// `[B,L,H,W]`, integer labels `[B,H,W]` and per-pixel weights.
    pub fn weighted_cross_entropy(&mut self, p: Var, labels: &[u8], weights: &[T]) -> Result<Var> {
        let [b, l, h, w] = self.value(p).dims4("weighted_cross_entropy")?;
        let hw = h * w;
        if labels.len() != b * hw || weights.len() != b * hw {
            return Err(Error::dim(
                "weighted_cross_entropy",
                format!("labels/weights must have {} entries", b * hw),
            ));
        }
        check_labels(labels, l)?;
        let clamp = T::from_f64_lossy(PROB_CLAMP);
        let probs = self.value(p).data();
        let mut loss = T::zero();
        for bi in 0..b {
            for px in 0..hw {
                let i = bi * hw + px;
                let pr = probs[(bi * l + labels[i] as usize) * hw + px].max(clamp);
                loss -= weights[i] * pr.ln();
            }
        }
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCe {
                p,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// `1 - sum_l w_l (2 sum_i p_li g_li + eps) / sum_l w_l (sum_i (p_li + g_li) + eps)`.
    ///
    /// A class with weight zero is left out of both sums.
    pub fn dice_loss(&mut self, p: Var, labels: &[u8], class_weights: &[T], eps: f64) -> Result<Var> {
        let [b, l, h, w] = self.value(p).dims4("dice_loss")?;
        let hw = h * w;
        if labels.len() != b * hw || class_weights.len() != l {
            return Err(Error::dim("dice_loss", "labels or class weights have the wrong length"));
        }
        check_labels(labels, l)?;
        let eps = T::from_f64_lossy(eps);
        let probs = self.value(p).data();
        let mut inter = vec![T::zero(); l];
        let mut psum = vec![T::zero(); l];
        let mut gsum = vec![T::zero(); l];
        for bi in 0..b {
            for li in 0..l {
                let plane = &probs[(bi * l + li) * hw..(bi * l + li + 1) * hw];
                let lab = &labels[bi * hw..(bi + 1) * hw];
                for (&pv, &g) in plane.iter().zip(lab) {
                    psum[li] += pv;
                    if g as usize == li {
                        inter[li] += pv;
                        gsum[li] += T::one();
                    }
                }
            }
        }
        let two = T::one() + T::one();
        let mut num = T::zero();
        let mut den = T::zero();
        for li in 0..l {
            let wl = class_weights[li];
            if wl == T::zero() {
                continue;
            }
            num += wl * (two * inter[li] + eps);
            den += wl * (psum[li] + gsum[li] + eps);
        }
        if den == T::zero() {
            return Err(Error::Undefined("dice loss with every class weight zero".into()));
        }
        let loss = T::one() - num / den;
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                p,
                labels: labels.to_vec(),
                class_weights: class_weights.to_vec(),
                numerator: num,
                denominator: den,
            },
            rg,
        ))
    }

    /// Group-lasso penalty of a `[N,h,kh,kw]` kernel whose `N` filters form
    /// `groups` contiguous groups: the sum over (group, input channel) of
    /// the Euclidean norm of that group's weights on that channel.
    pub fn group_lasso(&mut self, w: Var, groups: usize) -> Result<Var> {
        let [n, h, kh, kw] = self.value(w).dims4("group_lasso")?;
        if groups == 0 || n % groups != 0 {
            return Err(Error::dim("group_lasso", format!("{n} filters not divisible into {groups} groups")));
        }
        let norms = group_norms(self.value(w).data(), [n, h, kh, kw], groups);
        let total = norms.iter().copied().sum();
        let rg = self.rg(&[w]);
        Ok(self.push(Tensor::scalar(total), Op::GroupLasso { w, groups, norms }, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g);
            for (v, dv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(dv),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                x,
                w,
                geom,
                out_channels,
            } => {
                let b = self.value(*x).shape()[0];
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    b,
                    geom,
                    self.value(*w).data(),
                    *out_channels,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                out
            }
            Op::ConvTranspose {
                x,
                w,
                geom,
                in_channels,
            } => {
                let b = self.value(*x).shape()[0];
                let (dx, dw) = kernels::conv_transpose_backward(
                    self.value(*x).data(),
                    b,
                    *in_channels,
                    geom,
                    self.value(*w).data(),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                out
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                vec![(*x, dx)]
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::MaskMul { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect())]
            }
            Op::Concat { parts } => {
                let [b, _, h, w] = *<&[usize; 4]>::try_from(node.value.shape()).expect("4-d");
                let hw = h * w;
                let total = node.value.shape()[1];
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(b * pc * hw);
                        for bi in 0..b {
                            let start = (bi * total + offset) * hw;
                            dp.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        out.push((p, dp));
                    }
                    offset += pc;
                }
                out
            }
            Op::Gather { x, indices } => {
                let [b, c, h, w] = *<&[usize; 4]>::try_from(self.value(*x).shape()).expect("4-d");
                let hw = h * w;
                let k = indices.len();
                let mut dx = vec![T::zero(); b * c * hw];
                for bi in 0..b {
                    for (j, &ci) in indices.iter().enumerate() {
                        let src = &g[(bi * k + j) * hw..(bi * k + j + 1) * hw];
                        dx[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [b, c, h, w] = *<&[usize; 4]>::try_from(node.value.shape()).expect("4-d");
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                        dbeta[ci] += kernels::sum(&g[r.clone()]);
                        dgamma[ci] += kernels::dot(&g[r.clone()], &xhat[r]);
                    }
                }
                let mut out = vec![(*gamma, dgamma.clone()), (*beta, dbeta.clone())];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let nt = T::from_usize(b * hw).expect("count fits");
                    for bi in 0..b {
                        for ci in 0..c {
                            let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                            let k = gam[ci] * inv_std[ci];
                            let (mb, mg) = if *batch_stats {
                                (dbeta[ci] / nt, dgamma[ci] / nt)
                            } else {
                                (T::zero(), T::zero())
                            };
                            for ((d, &gv), &xh) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *d = k * (gv - mb - xh * mg);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out
            }
            Op::BiasAdd { x, bias } => {
                let [b, c, h, w] = *<&[usize; 4]>::try_from(node.value.shape()).expect("4-d");
                let hw = h * w;
                let mut db = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        db[ci] += g[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::Softmax { x } => {
                let [b, l, h, w] = *<&[usize; 4]>::try_from(node.value.shape()).expect("4-d");
                let hw = h * w;
                let p = node.value.data();
                let mut dx = vec![T::zero(); p.len()];
                for bi in 0..b {
                    let base = bi * l * hw;
                    for px in 0..hw {
                        let mut dot = T::zero();
                        for li in 0..l {
                            dot += p[base + li * hw + px] * g[base + li * hw + px];
                        }
                        for li in 0..l {
                            let k = base + li * hw + px;
                            dx[k] = p[k] * (g[k] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Combine { terms } => terms.iter().map(|&(v, c)| (v, vec![c * g[0]])).collect(),
            Op::WeightedCe { p, labels, weights } => {
                let [b, l, h, w] = *<&[usize; 4]>::try_from(self.value(*p).shape()).expect("4-d");
                let hw = h * w;
                let clamp = T::from_f64_lossy(PROB_CLAMP);
                let probs = self.value(*p).data();
                let mut dp = vec![T::zero(); probs.len()];
                for bi in 0..b {
                    for px in 0..hw {
                        let i = bi * hw + px;
                        let k = (bi * l + labels[i] as usize) * hw + px;
                        if probs[k] > clamp {
                            dp[k] = -g[0] * weights[i] / probs[k];
                        }
                    }
                }
                vec![(*p, dp)]
            }
            Op::Dice {
                p,
                labels,
                class_weights,
                numerator,
                denominator,
            } => {
                let [b, l, h, w] = *<&[usize; 4]>::try_from(self.value(*p).shape()).expect("4-d");
                let hw = h * w;
                let two = T::one() + T::one();
                let d2 = *denominator * *denominator;
                let mut dp = vec![T::zero(); b * l * hw];
                for bi in 0..b {
                    for li in 0..l {
                        let wl = class_weights[li];
                        if wl == T::zero() {
                            continue;
                        }
                        for px in 0..hw {
                            let gi = if labels[bi * hw + px] as usize == li { T::one() } else { T::zero() };
                            // d(1 - N/D)/dp = -(dN * D - N * dD) / D^2
                            let dn = wl * two * gi;
                            dp[(bi * l + li) * hw + px] = -g[0] * (dn * *denominator - *numerator * wl) / d2;
                        }
                    }
                }
                vec![(*p, dp)]
            }
            Op::GroupLasso { w, groups, norms } => {
                let [n, h, kh, kw] = *<&[usize; 4]>::try_from(self.value(*w).shape()).expect("4-d");
                let per = n / groups;
                let k = kh * kw;
                let wd = self.value(*w).data();
                let mut dw = vec![T::zero(); wd.len()];
                for f in 0..n {
                    let gi = f / per;
                    for c in 0..h {
                        let norm = norms[gi * h + c];
                        if norm == T::zero() {
                            continue;
                        }
                        let base = (f * h + c) * k;
                        for j in base..base + k {
                            dw[j] = g[0] * wd[j] / norm;
                        }
                    }
                }
                vec![(*w, dw)]
            }
        }
    }
}

fn check_labels(labels: &[u8], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&r| r as usize >= classes) {
        return Err(Error::Argument(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Norms indexed `[group * h + channel]`.
pub(crate) fn group_norms<T: Element>(w: &[T], dims: [usize; 4], groups: usize) -> Vec<T> {
    let [n, h, kh, kw] = dims;
    let per = n / groups;
    let k = kh * kw;
    let mut sq = vec![T::zero(); groups * h];
    for f in 0..n {
        let gi = f / per;
        for c in 0..h {
            let base = (f * h + c) * k;
            sq[gi * h + c] += w[base..base + k].iter().map(|&v| v * v).sum::<T>();
        }
    }
    sq.into_iter().map(|v| v.sqrt()).collect()
}
