use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};

use super::conv::{self, ConvGeom};
use super::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Square(Var),
    Mean(Var),
    Reshape(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ChannelMul(Var, Var),
    ChannelAdd(Var, Var),
    SpatialMul(Var, Var),
    ChannelDot(Var, Var),
    SpatialSoftmax(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: ArrayD<f64>,
        rstd: Vec<f64>,
    },
    BceWithLogits(Var, f64),
    Dropout(Var, ArrayD<f64>),
}

#[derive(Debug)]
struct Node {
    value: ArrayD<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// Reverse-mode autodiff tape over `f64` arrays.
///
/// Nodes are appended in evaluation order, so reverse creation order is a
/// valid topological order for backpropagation. Parameters are read from a
/// borrowed [`ParamStore`]; the graph never mutates them.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    vars: Vec<Option<ArrayD<f64>>>,
    params: BTreeMap<ParamId, ArrayD<f64>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ArrayD<f64>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length")
}

fn slice(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice().expect("contiguous array")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'s> Graph<'s> {
    /// A graph without parameters (inputs only).
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.input(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "not a scalar");
        a.iter().copied().next().unwrap()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Var {
        self.same_shape(a, b, what);
        let mut out = self.value(a).clone();
        out.zip_mut_with(self.value(b), |x, &y| *x = f(*x, y));
        self.push(out, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::Mean(a))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean(s)
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.abs(d);
        self.mean(s)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(
            v.len(),
            shape.iter().product::<usize>(),
            "reshape: element count"
        );
        let out = from_vec(shape, slice(v).to_vec());
        self.push(out, Op::Reshape(a))
    }

    /// Cubic-kernel 3D convolution, NCDHW layout.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad);
        let bias = b.map(|b| slice(self.value(b)).to_vec());
        let out = conv::forward(
            &geom,
            slice(self.value(x)),
            slice(self.value(w)),
            bias.as_deref(),
        );
        let out = from_vec(&geom.out_shape(), out);
        self.push(out, Op::Conv3d { x, w, b, geom })
    }

    /// Nearest-neighbour upsampling by 2 along each spatial axis.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 5);
        let (d, h, w) = (s[2], s[3], s[4]);
        let src = slice(self.value(a));
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * 8 * d * h * w];
        let ov = 8 * d * h * w;
        for p in 0..planes {
            let sp = &src[p * d * h * w..][..d * h * w];
            let dp = &mut out[p * ov..][..ov];
            for z in 0..2 * d {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        dp[(z * 2 * h + y) * 2 * w + x] = sp[((z / 2) * h + y / 2) * w + x / 2];
                    }
                }
            }
        }
        let out = from_vec(&[s[0], s[1], 2 * d, 2 * h, 2 * w], out);
        self.push(out, Op::Upsample2x(a))
    }

    /// Concatenate rank-5 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]).to_vec();
        let sp = spatial(&s0);
        let mut chans = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), 5, "concat: rank 5 required");
            assert!(
                s[0] == s0[0] && s[2..] == s0[2..],
                "concat: batch/spatial mismatch"
            );
            chans += s[1];
        }
        let mut out = Vec::with_capacity(s0[0] * chans * sp);
        for b in 0..s0[0] {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&slice(self.value(p))[b * c * sp..][..c * sp]);
            }
        }
        let out = from_vec(&[s0[0], chans, s0[2], s0[3], s0[4]], out);
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// `x @ w^T + b` for `x: [B, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear: input must be [B, In]");
        assert_eq!(xs[1], ws[1], "linear: feature mismatch");
        let (bn, i_n, o_n) = (xs[0], xs[1], ws[0]);
        let xv = slice(self.value(x));
        let wv = slice(self.value(w));
        let bv = b.map(|b| slice(self.value(b)));
        let mut out = vec![0.0; bn * o_n];
        for r in 0..bn {
            let xr = &xv[r * i_n..][..i_n];
            for o in 0..o_n {
                let wr = &wv[o * i_n..][..i_n];
                let mut acc = bv.map_or(0.0, |b| b[o]);
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                out[r * o_n + o] = acc;
            }
        }
        let out = from_vec(&[bn, o_n], out);
        self.push(out, Op::Linear { x, w, b })
    }

    fn check_channel_operand(&self, x: Var, s: Var, what: &str) -> (usize, usize, usize) {
        let xs = self.shape(x);
        let ss = self.shape(s);
        assert!(xs.len() >= 3, "{what}: feature map rank");
        assert_eq!(ss, &xs[..2], "{what}: per-channel operand must be [B, C]");
        (xs[0], xs[1], spatial(xs))
    }

    /// `x[b, c, ...] * s[b, c]`.
    pub fn channel_mul(&mut self, x: Var, s: Var) -> Var {
        let (bn, c, sp) = self.check_channel_operand(x, s, "channel_mul");
        let sv = slice(self.value(s));
        let mut out = self.value(x).clone();
        for (i, chunk) in out.as_slice_mut().unwrap().chunks_mut(sp).enumerate() {
            debug_assert!(i < bn * c);
            let k = sv[i];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        self.push(out, Op::ChannelMul(x, s))
    }

    /// `x[b, c, ...] + s[b, c]`.
    pub fn channel_add(&mut self, x: Var, s: Var) -> Var {
        let (_, _, sp) = self.check_channel_operand(x, s, "channel_add");
        let sv = slice(self.value(s));
        let mut out = self.value(x).clone();
        for (i, chunk) in out.as_slice_mut().unwrap().chunks_mut(sp).enumerate() {
            let k = sv[i];
            chunk.iter_mut().for_each(|v| *v += k);
        }
        self.push(out, Op::ChannelAdd(x, s))
    }

    /// `x[b, c, p] * w[b, 0, p]`: one weight per spatial position, shared by all channels.
    pub fn spatial_mul(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        assert!(
            ws[0] == xs[0] && ws[1] == 1 && ws[2..] == xs[2..],
            "spatial_mul: weight must be [B, 1, spatial...]"
        );
        let sp = spatial(&xs);
        let wv = slice(self.value(w)).to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.as_slice_mut().unwrap().chunks_mut(sp).enumerate() {
            let b = i / xs[1];
            let wr = &wv[b * sp..][..sp];
            chunk.iter_mut().zip(wr).for_each(|(v, k)| *v *= k);
        }
        self.push(out, Op::SpatialMul(x, w))
    }

    /// `out[b, 0, p] = sum_c q[b, c, p] * k[b, c]`.
    pub fn channel_dot(&mut self, q: Var, k: Var) -> Var {
        let (bn, c, sp) = self.check_channel_operand(q, k, "channel_dot");
        let qs = self.shape(q).to_vec();
        let qv = slice(self.value(q));
        let kv = slice(self.value(k));
        let mut out = vec![0.0; bn * sp];
        for b in 0..bn {
            let dst = &mut out[b * sp..][..sp];
            for ch in 0..c {
                let kc = kv[b * c + ch];
                let src = &qv[(b * c + ch) * sp..][..sp];
                dst.iter_mut().zip(src).for_each(|(d, q)| *d += q * kc);
            }
        }
        let mut shape = qs.clone();
        shape[1] = 1;
        let out = from_vec(&shape, out);
        self.push(out, Op::ChannelDot(q, k))
    }

    /// Softmax over all non-batch axes of a `[B, 1, spatial...]` tensor.
    pub fn spatial_softmax(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s[1], 1, "spatial_softmax: single channel expected");
        let sp = spatial(&s);
        let mut out = self.value(a).clone();
        for row in out.as_slice_mut().unwrap().chunks_mut(sp) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(out, Op::SpatialSoftmax(a))
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let (bn, c, sp) = (s[0], s[1], spatial(&s));
        assert!(groups > 0 && c % groups == 0, "group_norm: groups must divide C");
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let cg = c / groups;
        let n = (cg * sp) as f64;
        let xv = slice(self.value(x));
        let gv = slice(self.value(gamma));
        let bv = slice(self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(bn * groups);
        for b in 0..bn {
            for g in 0..groups {
                let base = (b * c + g * cg) * sp;
                let seg = &xv[base..base + cg * sp];
                let mean = seg.iter().sum::<f64>() / n;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let r = 1.0 / (var + eps).sqrt();
                rstd.push(r);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    for p in 0..sp {
                        let i = base + ci * sp + p;
                        let h = (xv[i] - mean) * r;
                        xhat[i] = h;
                        out[i] = h * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let out = from_vec(&s, out);
        let xhat = from_vec(&s, xhat);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        )
    }

    /// Mean binary cross-entropy against a constant target, from logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Var {
        let v = self.value(logits);
        let n = v.len() as f64;
        let loss = v
            .iter()
            .map(|&x| x.max(0.0) - x * target + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::BceWithLogits(logits, target),
        )
    }

    /// Inverted dropout with an externally drawn keep-mask (1 = keep).
    pub fn dropout(&mut self, a: Var, keep: ArrayD<f64>, p: f64) -> Var {
        assert_eq!(keep.shape(), self.shape(a), "dropout mask shape");
        let k = 1.0 / (1.0 - p);
        let mask = keep.mapv(|m| m * k);
        let mut out = self.value(a).clone();
        out.zip_mut_with(&mask, |x, m| *x *= m);
        self.push(out, Op::Dropout(a, mask))
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));

        fn acc(grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, gout.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, gout.clone());
                    acc(&mut grads, *b, -&gout);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &gout * self.value(*b));
                    acc(&mut grads, *b, &gout * self.value(*a));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &gout * *k),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    let g = from_vec(&shape, slice(&gout).to_vec());
                    acc(&mut grads, *a, g);
                }
                Op::Silu(a) => {
                    let mut g = self.value(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    g *= &gout;
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut g = node.value.mapv(|y| 1.0 - y * y);
                    g *= &gout;
                    acc(&mut grads, *a, g);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut g = self
                        .value(*a)
                        .mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                    g *= &gout;
                    acc(&mut grads, *a, g);
                }
                Op::Abs(a) => {
                    let mut g = self.value(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    g *= &gout;
                    acc(&mut grads, *a, g);
                }
                Op::Square(a) => {
                    let mut g = self.value(*a).mapv(|x| 2.0 * x);
                    g *= &gout;
                    acc(&mut grads, *a, g);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let k = slice(&gout)[0] / src.len() as f64;
                    acc(&mut grads, *a, ArrayD::from_elem(src.raw_dim(), k));
                }
                Op::Conv3d { x, w, b, geom } => {
                    let (gx, gw, gb) = conv::backward(
                        geom,
                        slice(self.value(*x)),
                        slice(self.value(*w)),
                        slice(&gout),
                    );
                    acc(&mut grads, *x, from_vec(self.shape(*x), gx));
                    acc(&mut grads, *w, from_vec(self.shape(*w), gw));
                    if let Some(b) = b {
                        acc(&mut grads, *b, from_vec(self.shape(*b), gb));
                    }
                }
                Op::Upsample2x(a) => {
                    let s = self.shape(*a).to_vec();
                    let (d, h, w) = (s[2], s[3], s[4]);
                    let planes = s[0] * s[1];
                    let go = slice(&gout);
                    let mut g = vec![0.0; planes * d * h * w];
                    let ov = 8 * d * h * w;
                    for p in 0..planes {
                        let sp = &go[p * ov..][..ov];
                        let dp = &mut g[p * d * h * w..][..d * h * w];
                        for z in 0..2 * d {
                            for y in 0..2 * h {
                                for x in 0..2 * w {
                                    dp[((z / 2) * h + y / 2) * w + x / 2] +=
                                        sp[(z * 2 * h + y) * 2 * w + x];
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, from_vec(&s, g));
                }
                Op::Concat(parts) => {
                    let os = node.value.shape();
                    let (bn, ctot, sp) = (os[0], os[1], spatial(os));
                    let go = slice(&gout);
                    let mut off = 0;
                    for &p in parts {
                        let ps = self.shape(p).to_vec();
                        let c = ps[1];
                        let mut g = Vec::with_capacity(bn * c * sp);
                        for b in 0..bn {
                            g.extend_from_slice(&go[(b * ctot + off) * sp..][..c * sp]);
                        }
                        acc(&mut grads, p, from_vec(&ps, g));
                        off += c;
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x).to_vec();
                    let ws = self.shape(*w).to_vec();
                    let (bn, i_n, o_n) = (xs[0], xs[1], ws[0]);
                    let xv = slice(self.value(*x));
                    let wv = slice(self.value(*w));
                    let go = slice(&gout);
                    let mut gx = vec![0.0; bn * i_n];
                    let mut gw = vec![0.0; o_n * i_n];
                    let mut gb = vec![0.0; o_n];
                    for r in 0..bn {
                        for o in 0..o_n {
                            let gv = go[r * o_n + o];
                            gb[o] += gv;
                            for j in 0..i_n {
                                gx[r * i_n + j] += gv * wv[o * i_n + j];
                                gw[o * i_n + j] += gv * xv[r * i_n + j];
                            }
                        }
                    }
                    acc(&mut grads, *x, from_vec(&xs, gx));
                    acc(&mut grads, *w, from_vec(&ws, gw));
                    if let Some(b) = b {
                        acc(&mut grads, *b, from_vec(&[o_n], gb));
                    }
                }
                Op::ChannelMul(x, s) => {
                    let xs = self.shape(*x).to_vec();
                    let sp = spatial(&xs);
                    let sv = slice(self.value(*s));
                    let xv = slice(self.value(*x));
                    let go = slice(&gout);
                    let mut gx = vec![0.0; xv.len()];
                    let mut gs = vec![0.0; sv.len()];
                    for (i, k) in sv.iter().enumerate() {
                        let r = i * sp..(i + 1) * sp;
                        let mut a = 0.0;
                        for ((dx, g), xv) in gx[r.clone()].iter_mut().zip(&go[r.clone()]).zip(&xv[r])
                        {
                            *dx = g * k;
                            a += g * xv;
                        }
                        gs[i] = a;
                    }
                    acc(&mut grads, *x, from_vec(&xs, gx));
                    acc(&mut grads, *s, from_vec(self.shape(*s), gs));
                }
                Op::ChannelAdd(x, s) => {
                    let xs = self.shape(*x).to_vec();
                    let sp = spatial(&xs);
                    let gs: Vec<f64> = slice(&gout).chunks(sp).map(|c| c.iter().sum()).collect();
                    acc(&mut grads, *x, gout.clone());
                    acc(&mut grads, *s, from_vec(self.shape(*s), gs));
                }
                Op::SpatialMul(x, w) => {
                    let xs = self.shape(*x).to_vec();
                    let (c, sp) = (xs[1], spatial(&xs));
                    let xv = slice(self.value(*x));
                    let wv = slice(self.value(*w));
                    let go = slice(&gout);
                    let mut gx = vec![0.0; xv.len()];
                    let mut gw = vec![0.0; wv.len()];
                    for i in 0..xs[0] * c {
                        let b = i / c;
                        for p in 0..sp {
                            let j = i * sp + p;
                            gx[j] = go[j] * wv[b * sp + p];
                            gw[b * sp + p] += go[j] * xv[j];
                        }
                    }
                    acc(&mut grads, *x, from_vec(&xs, gx));
                    acc(&mut grads, *w, from_vec(self.shape(*w), gw));
                }
                Op::ChannelDot(q, k) => {
                    let qs = self.shape(*q).to_vec();
                    let (bn, c, sp) = (qs[0], qs[1], spatial(&qs));
                    let qv = slice(self.value(*q));
                    let kv = slice(self.value(*k));
                    let go = slice(&gout);
                    let mut gq = vec![0.0; qv.len()];
                    let mut gk = vec![0.0; kv.len()];
                    for b in 0..bn {
                        let gr = &go[b * sp..][..sp];
                        for ch in 0..c {
                            let kc = kv[b * c + ch];
                            let base = (b * c + ch) * sp;
                            let mut a = 0.0;
                            for p in 0..sp {
                                gq[base + p] = gr[p] * kc;
                                a += gr[p] * qv[base + p];
                            }
                            gk[b * c + ch] = a;
                        }
                    }
                    acc(&mut grads, *q, from_vec(&qs, gq));
                    acc(&mut grads, *k, from_vec(self.shape(*k), gk));
                }
                Op::SpatialSoftmax(a) => {
                    let s = self.shape(*a).to_vec();
                    let sp = spatial(&s);
                    let y = slice(&node.value);
                    let go = slice(&gout);
                    let mut g = vec![0.0; y.len()];
                    for r in 0..s[0] {
                        let yr = &y[r * sp..][..sp];
                        let gr = &go[r * sp..][..sp];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for p in 0..sp {
                            g[r * sp + p] = yr[p] * (gr[p] - dot);
                        }
                    }
                    acc(&mut grads, *a, from_vec(&s, g));
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let s = self.shape(*x).to_vec();
                    let (bn, c, sp) = (s[0], s[1], spatial(&s));
                    let cg = c / groups;
                    let n = (cg * sp) as f64;
                    let gv = slice(self.value(*gamma));
                    let xh = slice(xhat);
                    let go = slice(&gout);
                    let mut gx = vec![0.0; xh.len()];
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for b in 0..bn {
                        for g in 0..*groups {
                            let base = (b * c + g * cg) * sp;
                            let r = rstd[b * groups + g];
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for ci in 0..cg {
                                let ch = g * cg + ci;
                                for p in 0..sp {
                                    let i = base + ci * sp + p;
                                    let d = go[i] * gv[ch];
                                    sum_d += d;
                                    sum_dx += d * xh[i];
                                    ggamma[ch] += go[i] * xh[i];
                                    gbeta[ch] += go[i];
                                }
                            }
                            for ci in 0..cg {
                                let ch = g * cg + ci;
                                for p in 0..sp {
                                    let i = base + ci * sp + p;
                                    let d = go[i] * gv[ch];
                                    gx[i] = r / n * (n * d - sum_d - xh[i] * sum_dx);
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, from_vec(&s, gx));
                    acc(&mut grads, *gamma, from_vec(&[c], ggamma));
                    acc(&mut grads, *beta, from_vec(&[c], gbeta));
                }
                Op::BceWithLogits(a, t) => {
                    let src = self.value(*a);
                    let k = slice(&gout)[0] / src.len() as f64;
                    let g = src.mapv(|x| (sigmoid(x) - t) * k);
                    acc(&mut grads, *a, g);
                }
                Op::Dropout(a, mask) => acc(&mut grads, *a, &gout * mask),
            }
            grads[i] = Some(gout);
        }

        let mut params: BTreeMap<ParamId, ArrayD<f64>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &grads[i]) {
                match params.get_mut(&id) {
                    Some(e) => *e += g,
                    None => {
                        params.insert(id, g.clone());
                    }
                }
            }
        }
        Gradients {
            vars: grads,
            params,
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}
