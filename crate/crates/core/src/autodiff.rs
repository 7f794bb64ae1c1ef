//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node holding its output value and
//! enough structure to replay the chain rule. Node indices only ever grow, so
//! the tape is topologically ordered by construction.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Reduction};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named trainable tensors with their accumulated gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param { name, value, grad });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2`, preserving spatial size; `k` must be odd.
    Same,
    Valid,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Concat { a: Var, b: Var },
    Tile { x: Var, times: usize },
    Stack(Vec<Var>),
    Select { x: Var, index: usize },
    LeakyRelu { x: Var, slope: T },
    Resize { x: Var },
    MeanBatch { x: Var },
    Sigmoid { x: Var },
    SoftDice { pred: Var, target: Var, eps: T },
    Sum { x: Var },
    Mul { a: Var, b: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    reduction: Reduction,
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[b, c, h, w] => Ok([b, c, h, w]),
        s => Err(Error::shape(format!("{what}: expected [B,C,H,W], got {s:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_reduction(Reduction::default())
    }

    pub fn with_reduction(reduction: Reduction) -> Self {
        Self { nodes: Vec::new(), reduction }
    }

    pub fn reduction(&self) -> Reduction {
        self.reduction
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign of every leaky-ReLU input recorded so far, in tape order.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::LeakyRelu { x, .. } = n.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), &[])
    }

    /// Convolution of `x: [B,Cin,H,W]` with `w: [Cout,Cin,k,k]` plus `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let [batch, c_in, h, wd] = dims4(self.value(x), "conv2d input")?;
        let [c_out, wc_in, kh, kw] = dims4(self.value(w), "conv2d kernel")?;
        if wc_in != c_in {
            return Err(Error::shape(format!("conv2d: kernel expects {wc_in} input channels, input has {c_in}")));
        }
        if kh != kw {
            return Err(Error::config(format!("conv2d: non-square kernel {kh}x{kw}")));
        }
        if self.value(b).shape() != [c_out] {
            return Err(Error::shape(format!("conv2d: bias shape {:?}, expected [{c_out}]", self.value(b).shape())));
        }
        let pad = match padding {
            Padding::Same if kh % 2 == 0 => {
                return Err(Error::config(format!("conv2d: same padding needs an odd kernel, got {kh}")))
            }
            Padding::Same => (kh - 1) / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < kh || wd + 2 * pad < kh {
            return Err(Error::shape(format!("conv2d: kernel {kh} exceeds input {h}x{wd}")));
        }
        let geom = ConvGeom { batch, c_in, h, w: wd, c_out, k: kh, pad };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let (ho, wo) = geom.out_hw();
        let value = Tensor::new(vec![batch, c_out, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Channel concatenation: `a`'s channels first, then `b`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = dims4(self.value(a), "concat lhs")?;
        let [bb, cb, hb, wb] = dims4(self.value(b), "concat rhs")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(format!("concat: [{ba},_,{ha},{wa}] vs [{bb},_,{hb},{wb}]")));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for i in 0..ba {
            out.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    /// Repeats a `[1, ...]` tensor `times` along the batch axis.
    pub fn tile(&mut self, x: Var, times: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.first() != Some(&1) || times == 0 {
            return Err(Error::shape(format!("tile: cannot tile {xs:?} x{times}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let mut shape = xs;
        shape[0] = times;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Tile { x, times }, &[x]))
    }

    /// Concatenates along the batch axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::domain("stack: empty list"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut batch = 0;
        let mut out = Vec::new();
        for &v in xs {
            let s = self.value(v).shape();
            if s[1..] != tail[..] {
                return Err(Error::shape(format!("stack: {s:?} vs [_, {tail:?}]")));
            }
            batch += s[0];
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![batch];
        shape.extend(tail);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Stack(xs.to_vec()), xs))
    }

    /// Item `index` of the batch axis, kept as a batch of one.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if index >= s[0] {
            return Err(Error::shape(format!("select: index {index} of {s:?}")));
        }
        let stride: usize = s[1..].iter().product();
        let data = self.value(x).data()[index * stride..(index + 1) * stride].to_vec();
        let mut shape = s;
        shape[0] = 1;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Select { x, index }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| kernels::leaky_relu(v, slope));
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    /// Bilinear resampling of the two trailing axes (half-pixel centers).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::domain("resize: zero output extent"));
        }
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("resize: rank {} input", s.len())));
        }
        let (h, w) = self.value(x).hw();
        let planes = self.value(x).len() / (h * w);
        let out = kernels::bilinear_forward(self.value(x).data(), planes, (h, w), (out_h, out_w));
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Resize { x }, &[x]))
    }

    /// Mean over the batch axis: `[n, ...] -> [1, ...]`.
    pub fn mean_batch(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let n = s[0];
        if n == 0 {
            return Err(Error::domain("mean over an empty batch"));
        }
        let out = kernels::mean_over_batch(self.value(x).data(), n, self.reduction);
        let mut shape = s;
        shape[0] = 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MeanBatch { x }, &[x]))
    }

    /// `1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps)`, differentiable in `pred`.
    pub fn soft_dice_loss(&mut self, pred: Var, target: Var, eps: T) -> Result<Var> {
        let (p, y) = (self.value(pred), self.value(target));
        if p.shape() != y.shape() {
            return Err(Error::shape(format!("soft dice: prediction {:?} vs target {:?}", p.shape(), y.shape())));
        }
        let (inter, denom) = dice_terms(p.data(), y.data());
        let loss = T::one() - (T::lit(2.0) * inter + eps) / (denom + eps);
        Ok(self.push(Tensor::scalar(loss), Op::SoftDice { pred, target, eps }, &[pred]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("mul: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Accumulates `d loss / d p` into every parameter reached from `loss`.
    pub fn backward(&self, loss: Var, params: &mut ParamStore<T>) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward computation".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, params)?;
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        params: &mut ParamStore<T>,
    ) -> Result<()> {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                if id.0 >= params.len() {
                    return Err(Error::State(format!("tape references parameter {} outside the store", id.0)));
                }
                let dst = params.get_mut(*id).grad.data_mut();
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gi = self.wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut gw = self.wants(*w).then(|| vec![T::zero(); wv.len()]);
                let mut gb = self.wants(*b).then(|| vec![T::zero(); geom.c_out]);
                kernels::conv2d_backward(geom, xv, wv, g, gi.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                for (v, part) in [(*x, gi), (*w, gw), (*b, gb)] {
                    if let Some(part) = part {
                        add_into(self.slot(grads, v), &part);
                    }
                }
            }
            Op::Concat { a, b } => {
                let [batch, ca, h, w] = dims4(self.value(*a), "concat")?;
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let c = ca + cb;
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for i in 0..batch {
                        add_into(
                            &mut ga[i * ca * plane..(i + 1) * ca * plane],
                            &g[i * c * plane..(i * c + ca) * plane],
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = self.slot(grads, *b);
                    for i in 0..batch {
                        add_into(
                            &mut gb[i * cb * plane..(i + 1) * cb * plane],
                            &g[(i * c + ca) * plane..(i + 1) * c * plane],
                        );
                    }
                }
            }
            Op::Tile { x, times } => {
                let gx = self.slot(grads, *x);
                let n = gx.len();
                for t in 0..*times {
                    add_into(gx, &g[t * n..(t + 1) * n]);
                }
            }
            Op::Stack(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    if self.wants(v) {
                        add_into(self.slot(grads, v), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Select { x, index } => {
                let n = g.len();
                let gx = self.slot(grads, *x);
                add_into(&mut gx[index * n..(index + 1) * n], g);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let gx = self.slot(grads, *x);
                for ((d, &gv), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *d += gv * kernels::leaky_relu_grad(xi, *slope);
                }
            }
            Op::Sigmoid { x } => {
                let yv = node.value.data();
                let gx = self.slot(grads, *x);
                for ((d, &gv), &y) in gx.iter_mut().zip(g).zip(yv) {
                    *d += gv * y * (T::one() - y);
                }
            }
            Op::Resize { x } => {
                let (h, w) = self.value(*x).hw();
                let (oh, ow) = node.value.hw();
                let planes = self.value(*x).len() / (h * w);
                kernels::bilinear_backward(g, planes, (h, w), (oh, ow), self.slot(grads, *x));
            }
            Op::MeanBatch { x } => {
                let n = self.value(*x).shape()[0];
                let inv = T::one() / T::from_usize(n).unwrap();
                let stride = g.len();
                let gx = self.slot(grads, *x);
                for i in 0..n {
                    for (d, &gv) in gx[i * stride..(i + 1) * stride].iter_mut().zip(g) {
                        *d += gv * inv;
                    }
                }
            }
            Op::SoftDice { pred, target, eps } => {
                let p = self.value(*pred).data();
                let y = self.value(*target).data();
                let (inter, denom) = dice_terms(p, y);
                let two = T::lit(2.0);
                let num = two * inter + *eps;
                let den = denom + *eps;
                let scale = g[0] / (den * den);
                let gp = self.slot(grads, *pred);
                for ((d, &pi), &yi) in gp.iter_mut().zip(p).zip(y) {
                    *d -= scale * (two * yi * den - num * two * pi);
                }
            }
            Op::Sum { x } => {
                let gx = self.slot(grads, *x);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.slot(grads, *a);
                    for ((d, &gv), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv * bi;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    for ((d, &gv), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gv * ai;
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `(sum(y p), sum(y^2) + sum(p^2))`.
fn dice_terms<T: Scalar>(p: &[T], y: &[T]) -> (T, T) {
    p.iter().zip(y).fold((T::zero(), T::zero()), |(i, d), (&pi, &yi)| (i + pi * yi, d + pi * pi + yi * yi))
}

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Tape and finite-difference derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    /// Coordinates visited, including skipped ones.
    pub coordinates: usize,
    /// Coordinates left out because a perturbation moved some leaky-ReLU
    /// input across zero, where central differences are meaningless.
    pub kinks: usize,
}

/// Checks every coordinate of every parameter in 64-bit precision.
///
/// `f` must build the same scalar function each time it is called.
pub fn grad_check<F>(f: F, params: &mut ParamStore<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::config("grad_check: eps must be positive"));
    }
    let eval = |params: &ParamStore<f64>| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let out = f(&mut tape, params)?;
        Ok((tape.value(out).item(), tape.activation_pattern()))
    };
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params)?;
    let pattern = tape.activation_pattern();
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: None, worst_pair: (0.0, 0.0), coordinates: 0, kinks: 0 };
    for (pi, grads) in analytic.iter().enumerate() {
        let id = ParamId(pi);
        for (j, &a) in grads.iter().enumerate() {
            let orig = params.get(id).value.data()[j];
            params.get_mut(id).value.data_mut()[j] = orig + eps;
            let (up, up_pattern) = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig - eps;
            let (down, down_pattern) = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig;
            report.coordinates += 1;
            if up_pattern != pattern || down_pattern != pattern {
                report.kinks += 1;
                continue;
            }
            let n = (up - down) / (2.0 * eps);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((params.get(id).name.clone(), j));
                report.worst_pair = (a, n);
            }
        }
    }
    Ok(report)
}
