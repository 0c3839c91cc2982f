//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of nodes. Each op evaluates eagerly,
//! stores its output value, and records its inputs plus whatever it needs
//! for the adjoint. Inputs always precede their consumers, so the reverse
//! pass is a single backwards sweep. The tape is not consumed by
//! [`Tape::backward`] and can be differentiated again.
//!
//! Batched activations are `N×C×H×W`; vectors per sample are `N×C`.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Euclidean,
    SquaredEuclidean,
}

/// Per-channel statistics of one batch-norm evaluation in batch mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

/// Anchor bookkeeping for one batch-hard triplet evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletStats {
    pub anchors: usize,
    pub skipped: usize,
    pub active: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        lo: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    /// Gradient routes through `route`: for max pools the argmax input
    /// index of every output; for avg pools, unused.
    Pool2d {
        x: Var,
        kind: PoolKind,
        window: (usize, usize),
        stride: (usize, usize),
        route: Vec<usize>,
    },
    ChannelPool {
        x: Var,
        kind: PoolKind,
        route: Vec<usize>,
    },
    GlobalPool {
        x: Var,
        kind: PoolKind,
        route: Vec<usize>,
    },
    GateSpatial {
        x: Var,
        m: Var,
    },
    GateChannel {
        x: Var,
        m: Var,
    },
    /// Fused losses keep d(loss)/d(input) computed during the forward pass.
    FusedLoss {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one reverse sweep, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Max-reduction comparison that lets NaN win so it reaches the loss.
fn beats(candidate: f64, current: f64) -> bool {
    candidate > current || (candidate.is_nan() && !current.is_nan())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::invalid(op, format!("N×C×H×W expected, got {:?}", t.shape()))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, c] => Ok((n, c)),
        _ => Err(Error::invalid(op, format!("N×C expected, got {:?}", t.shape()))),
    }
}

/// `(N, C, spatial)` of an `N×C` or `N×C×H×W` tensor.
fn channel_layout(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::invalid(
            op,
            format!("N×C or N×C×H×W expected, got {:?}", t.shape()),
        )),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A traced input: gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// An untraced input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · wᵀ + b` for `x: N×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = dims2("linear", self.value(x))?;
        let (dout, win) = dims2("linear", self.value(w))?;
        if win != din {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear bias", self.shape(w), self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * dout];
        kernels::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::from_parts(vec![n, dout], out), Op::Linear { x, w, b }, &inputs))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean of equally-shaped values, summed in argument order.
    pub fn mean_of(&mut self, items: &[Var]) -> Result<Var> {
        let (&first, rest) = items
            .split_first()
            .ok_or_else(|| Error::invalid("mean_of", "no items"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, 1.0 / items.len() as f64))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x < 0.0 { 0.0 } else { x });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&values, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Channel concatenation of `N×Cᵢ×H×W` maps.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            dims4("concat_channels", self.value(p))?;
        }
        self.concat(parts, 1)
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, lo: usize, hi: usize) -> Result<Var> {
        let out = self.value(x).slice_axis(axis, lo, hi)?;
        Ok(self.push(out, Op::Slice { x, axis, lo }, &[x]))
    }

    /// Height range `[row_lo, row_hi)` of `N×C×H×W` maps.
    pub fn slice_rows(&mut self, x: Var, row_lo: usize, row_hi: usize) -> Result<Var> {
        dims4("slice_rows", self.value(x))?;
        self.slice_axis(x, 2, row_lo, row_hi)
    }

    /// Zero-padded cross-correlation of `x: N×C×H×W` with `w: O×C×kh×kw`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (n, c, h, wd) = dims4("conv2d", self.value(x))?;
        let (o, wc, kh, kw) = dims4("conv2d weight", self.value(w))?;
        if wc != c {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", self.shape(w), self.shape(b)));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
        };
        let (ho, wo) = geom.out_hw().ok_or_else(|| {
            Error::invalid(
                "conv2d",
                format!("kernel {kh}×{kw} stride {stride:?} padding {padding:?} leaves no output for {h}×{wd}"),
            )
        })?;
        let npos = ho * wo;
        let k = geom.patch_len();
        let mut cols = vec![0.0; k * npos];
        let mut out = vec![0.0; n * o * npos];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for (img, dst) in xv.chunks_exact(c * h * wd).zip(out.chunks_exact_mut(o * npos)) {
            kernels::im2col(img, &geom, &mut cols);
            kernels::gemm(o, k, npos, wv, false, &cols, false, dst, false);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for img in out.chunks_exact_mut(o * npos) {
                for (plane, bb) in img.chunks_exact_mut(npos).zip(bias) {
                    plane.iter_mut().for_each(|v| *v += bb);
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::from_parts(vec![n, o, ho, wo], out),
            Op::Conv2d { x, w, b, geom },
            &inputs,
        ))
    }

    /// Per-channel normalization of `N×C` or `N×C×H×W` input followed by
    /// `gamma·x̂ + beta`.
    ///
    /// With `running == None` the batch statistics are used and returned;
    /// otherwise the given `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, sp) = channel_layout("batch_norm", self.value(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let count = n * sp;
        let xv = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::invalid("batch_norm", "running statistics width"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xv[(i * c + ch) * sp..(i * c + ch + 1) * sp].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut q = 0.0;
                    for i in 0..n {
                        q += xv[(i * c + ch) * sp..(i * c + ch + 1) * sp]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / count as f64;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * sp..(i * c + ch + 1) * sp;
                for j in r {
                    let h = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Windowed pooling of `N×C×H×W` without padding.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (n, c, h, w) = dims4("pool2d", self.value(x))?;
        let (wh, ww) = window;
        if wh == 0 || ww == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("pool2d", "window and stride must be positive"));
        }
        if wh > h || ww > w {
            return Err(Error::invalid(
                "pool2d",
                format!("window {window:?} larger than input {h}×{w}"),
            ));
        }
        let ho = (h - wh) / stride.0 + 1;
        let wo = (w - ww) / stride.1 + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut route = Vec::new();
        let area = (wh * ww) as f64;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, x0) = (oy * stride.0, ox * stride.1);
                    match kind {
                        PoolKind::Max => {
                            let mut best = base + y0 * w + x0;
                            for dy in 0..wh {
                                for dx in 0..ww {
                                    let j = base + (y0 + dy) * w + x0 + dx;
                                    if beats(xv[j], xv[best]) {
                                        best = j;
                                    }
                                }
                            }
                            out.push(xv[best]);
                            route.push(best);
                        }
                        PoolKind::Avg => {
                            let mut s = 0.0;
                            for dy in 0..wh {
                                let row = base + (y0 + dy) * w + x0;
                                s += xv[row..row + ww].iter().sum::<f64>();
                            }
                            out.push(s / area);
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::Pool2d {
                x,
                kind,
                window,
                stride,
                route,
            },
            &[x],
        ))
    }

    /// Collapses the channel axis: `N×C×H×W → N×1×H×W`.
    pub fn channel_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = dims4("channel_pool", self.value(x))?;
        let sp = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * sp];
        let mut route = Vec::new();
        if kind == PoolKind::Max {
            route = vec![0; n * sp];
        }
        for i in 0..n {
            for p in 0..sp {
                let at = |ch: usize| (i * c + ch) * sp + p;
                match kind {
                    PoolKind::Max => {
                        let mut best = at(0);
                        for ch in 1..c {
                            if beats(xv[at(ch)], xv[best]) {
                                best = at(ch);
                            }
                        }
                        out[i * sp + p] = xv[best];
                        route[i * sp + p] = best;
                    }
                    PoolKind::Avg => {
                        let mut s = 0.0;
                        for ch in 0..c {
                            s += xv[at(ch)];
                        }
                        out[i * sp + p] = s / c as f64;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, 1, h, w], out),
            Op::ChannelPool { x, kind, route },
            &[x],
        ))
    }

    /// Collapses the spatial axes: `N×C×H×W → N×C`.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = dims4("global_pool", self.value(x))?;
        let sp = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut route = Vec::new();
        for (plane, vals) in xv.chunks_exact(sp).enumerate() {
            match kind {
                PoolKind::Max => {
                    let mut best = 0;
                    for (j, &v) in vals.iter().enumerate() {
                        if beats(v, vals[best]) {
                            best = j;
                        }
                    }
                    out.push(vals[best]);
                    route.push(plane * sp + best);
                }
                PoolKind::Avg => out.push(vals.iter().sum::<f64>() / sp as f64),
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::GlobalPool { x, kind, route },
            &[x],
        ))
    }

    /// `x ⊙ m` with `m: N×1×H×W` broadcast over channels.
    pub fn gate_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("gate_spatial", self.value(x))?;
        if self.shape(m) != [n, 1, h, w] {
            return Err(Error::shape("gate_spatial", self.shape(x), self.shape(m)));
        }
        let sp = h * w;
        let (xv, mv) = (self.value(x).data(), self.value(m).data());
        let mut out = xv.to_vec();
        for i in 0..n {
            let gate = &mv[i * sp..(i + 1) * sp];
            for ch in 0..c {
                let plane = &mut out[(i * c + ch) * sp..(i * c + ch + 1) * sp];
                plane.iter_mut().zip(gate).for_each(|(v, g)| *v *= g);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::GateSpatial { x, m },
            &[x, m],
        ))
    }

    /// `x ⊙ m` with `m: N×C` broadcast over space.
    pub fn gate_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("gate_channel", self.value(x))?;
        if self.shape(m) != [n, c] {
            return Err(Error::shape("gate_channel", self.shape(x), self.shape(m)));
        }
        let sp = h * w;
        let (xv, mv) = (self.value(x).data(), self.value(m).data());
        let mut out = xv.to_vec();
        for (plane, &g) in out.chunks_exact_mut(sp).zip(mv) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::GateChannel { x, m },
            &[x, m],
        ))
    }

    /// Mean over rows of the cross-entropy between `softmax(logits)` and the
    /// per-row target distributions (`N×K`, each row summing to one).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (n, k) = dims2("softmax_cross_entropy", self.value(logits))?;
        if targets.shape() != [n, k] {
            return Err(Error::shape(
                "softmax_cross_entropy",
                self.shape(logits),
                targets.shape(),
            ));
        }
        let z = self.value(logits).data();
        let t = targets.data();
        let mut loss = 0.0;
        let mut grad = vec![0.0; n * k];
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..k {
                let logp = row[j] - lse;
                loss -= t[i * k + j] * logp;
                grad[i * k + j] = (logp.exp() - t[i * k + j]) / n as f64;
            }
        }
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::FusedLoss { x: logits, grad },
            &[logits],
        ))
    }

    /// Batch-hard triplet loss over `features: N×D`.
    ///
    /// For every anchor: hardest positive = farthest same-label sample,
    /// hardest negative = closest other-label sample (ties resolve to the
    /// lowest index). The loss is the mean over anchors of
    /// `[d_ap − d_an + margin]₊`; anchors lacking a positive or a negative
    /// are skipped and counted in the returned stats.
    pub fn batch_hard_triplet(
        &mut self,
        features: Var,
        labels: &[i64],
        margin: f64,
        distance: Distance,
    ) -> Result<(Var, TripletStats)> {
        let (n, d) = dims2("batch_hard_triplet", self.value(features))?;
        if labels.len() != n {
            return Err(Error::invalid(
                "batch_hard_triplet",
                format!("{} labels for {n} features", labels.len()),
            ));
        }
        let f = self.value(features).data();
        let row = |i: usize| &f[i * d..(i + 1) * d];
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let sq: f64 = row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                dist[i * n + j] = match distance {
                    Distance::Euclidean => sq.sqrt(),
                    Distance::SquaredEuclidean => sq,
                };
            }
        }
        let mut stats = TripletStats {
            anchors: n,
            ..Default::default()
        };
        let mut picks = Vec::new();
        for a in 0..n {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let dj = dist[a * n + j];
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| dj > dist[a * n + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| dj < dist[a * n + q]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(q)) => picks.push((a, p, q)),
                _ => stats.skipped += 1,
            }
        }
        let mut loss = 0.0;
        let mut grad = vec![0.0; n * d];
        let valid = picks.len();
        for &(a, p, q) in &picks {
            let hinge = dist[a * n + p] - dist[a * n + q] + margin;
            if hinge <= 0.0 {
                continue;
            }
            stats.active += 1;
            loss += hinge;
            let w = 1.0 / valid as f64;
            // d(dist)/d(f_a) for the pair (a, j); the partner gets the negation.
            let mut push_pair = |j: usize, sign: f64| {
                let dij = dist[a * n + j];
                let coef = match distance {
                    Distance::Euclidean if dij > 0.0 => 1.0 / dij,
                    Distance::Euclidean => 0.0,
                    Distance::SquaredEuclidean => 2.0,
                };
                for k in 0..d {
                    let g = sign * w * coef * (f[a * d + k] - f[j * d + k]);
                    grad[a * d + k] += g;
                    grad[j * d + k] -= g;
                }
            };
            push_pair(p, 1.0);
            push_pair(q, -1.0);
        }
        let value = if valid > 0 { loss / valid as f64 } else { 0.0 };
        let v = self.push(Tensor::scalar(value), Op::FusedLoss { x: features, grad }, &[features]);
        Ok((v, stats))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            .data_mut()
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let da = self.slot(grads, *a);
                    kernels::gemm(m, n, k, gd, false, tb.data(), true, da, true);
                }
                if self.wants(*b) {
                    let db = self.slot(grads, *b);
                    kernels::gemm(k, m, n, ta.data(), true, gd, false, db, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, din) = (tx.shape()[0], tx.shape()[1]);
                let dout = tw.shape()[0];
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    kernels::gemm(n, dout, din, gd, false, tw.data(), false, dx, true);
                }
                if self.wants(*w) {
                    let dw = self.slot(grads, *w);
                    kernels::gemm(dout, n, din, gd, true, tx.data(), false, dw, true);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let db = self.slot(grads, b);
                    for row in gd.chunks_exact(dout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    self.slot(grads, *a).iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                }
                if self.wants(*b) {
                    self.slot(grads, *b)
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(d, g)| *d += sign * g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = self.slot(grads, *a);
                    for ((d, g), y) in da.iter_mut().zip(gd).zip(tb) {
                        *d += g * y;
                    }
                }
                if self.wants(*b) {
                    let db = self.slot(grads, *b);
                    for ((d, g), x) in db.iter_mut().zip(gd).zip(ta) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                self.slot(grads, *a).iter_mut().zip(gd).for_each(|(d, g)| *d += s * g);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.slot(grads, *a).iter_mut().zip(gd).for_each(|(d, g)| *d += g);
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.slot(grads, *a).iter_mut().for_each(|d| *d += g0);
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let da = self.slot(grads, *a);
                for ((d, g), x) in da.iter_mut().zip(gd).zip(xv) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                let da = self.slot(grads, *a);
                for ((d, g), y) in da.iter_mut().zip(gd).zip(yv) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.value(p).shape()[*axis] * inner;
                    if self.wants(p) {
                        let dp = self.slot(grads, p);
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + block];
                            dp[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, lo } => {
                let src_shape = self.value(*x).shape();
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let full = src_shape[*axis] * inner;
                let block = node.value.shape()[*axis] * inner;
                let dx = self.slot(grads, *x);
                for o in 0..outer {
                    let dst = &mut dx[o * full + lo * inner..o * full + lo * inner + block];
                    dst.iter_mut()
                        .zip(&gd[o * block..(o + 1) * block])
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let o = tw.shape()[0];
                let (ho, wo) = geom.out_hw().expect("validated in forward");
                let npos = ho * wo;
                let k = geom.patch_len();
                let img_len = geom.c * geom.h * geom.w;
                let n = tx.shape()[0];
                let mut cols = vec![0.0; k * npos];
                if self.wants(*w) {
                    let mut dw = vec![0.0; o * k];
                    for i in 0..n {
                        kernels::im2col(&tx.data()[i * img_len..(i + 1) * img_len], geom, &mut cols);
                        kernels::gemm(
                            o,
                            npos,
                            k,
                            &gd[i * o * npos..(i + 1) * o * npos],
                            false,
                            &cols,
                            true,
                            &mut dw,
                            true,
                        );
                    }
                    self.slot(grads, *w).iter_mut().zip(&dw).for_each(|(d, g)| *d += g);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let db = self.slot(grads, b);
                    for img in gd.chunks_exact(o * npos) {
                        for (d, plane) in db.iter_mut().zip(img.chunks_exact(npos)) {
                            *d += plane.iter().sum::<f64>();
                        }
                    }
                }
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    for i in 0..n {
                        kernels::gemm(
                            k,
                            o,
                            npos,
                            tw.data(),
                            true,
                            &gd[i * o * npos..(i + 1) * o * npos],
                            false,
                            &mut cols,
                            false,
                        );
                        kernels::col2im(&cols, geom, &mut dx[i * img_len..(i + 1) * img_len]);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let sp: usize = shape[2..].iter().product();
                let count = (n * sp) as f64;
                let gv = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        for j in (i * c + ch) * sp..(i * c + ch + 1) * sp {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    for i in 0..n {
                        for ch in 0..c {
                            for j in (i * c + ch) * sp..(i * c + ch + 1) * sp {
                                let dxhat = gd[j] * gv[ch];
                                dx[j] += if *batch_stats {
                                    // Σ dx̂ = γ·Σdy and Σ dx̂·x̂ = γ·Σdy·x̂ per channel.
                                    inv_std[ch] / count
                                        * (count * dxhat - gv[ch] * dbeta[ch] - xhat[j] * gv[ch] * dgamma[ch])
                                } else {
                                    dxhat * inv_std[ch]
                                };
                            }
                        }
                    }
                }
                if self.wants(*gamma) {
                    self.slot(grads, *gamma)
                        .iter_mut()
                        .zip(&dgamma)
                        .for_each(|(d, g)| *d += g);
                }
                if self.wants(*beta) {
                    self.slot(grads, *beta)
                        .iter_mut()
                        .zip(&dbeta)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::Pool2d {
                x,
                kind,
                window,
                stride,
                route,
            } => {
                let dx = self.slot(grads, *x);
                match kind {
                    PoolKind::Max => {
                        for (&src, g) in route.iter().zip(gd) {
                            dx[src] += g;
                        }
                    }
                    PoolKind::Avg => {
                        let s = self.value(*x).shape();
                        let (h, w) = (s[2], s[3]);
                        let o = node.value.shape();
                        let (ho, wo) = (o[2], o[3]);
                        let area = (window.0 * window.1) as f64;
                        for plane in 0..o[0] * o[1] {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let g = gd[(plane * ho + oy) * wo + ox] / area;
                                    for dy in 0..window.0 {
                                        let row = plane * h * w + (oy * stride.0 + dy) * w + ox * stride.1;
                                        dx[row..row + window.1].iter_mut().for_each(|d| *d += g);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelPool { x, kind, route } => {
                let s = self.value(*x).shape();
                let (c, sp) = (s[1], s[2] * s[3]);
                let dx = self.slot(grads, *x);
                match kind {
                    PoolKind::Max => {
                        for (&src, g) in route.iter().zip(gd) {
                            dx[src] += g;
                        }
                    }
                    PoolKind::Avg => {
                        for (idx, g) in gd.iter().enumerate() {
                            let (i, p) = (idx / sp, idx % sp);
                            for ch in 0..c {
                                dx[(i * c + ch) * sp + p] += g / c as f64;
                            }
                        }
                    }
                }
            }
            Op::GlobalPool { x, kind, route } => {
                let s = self.value(*x).shape();
                let sp = s[2] * s[3];
                let dx = self.slot(grads, *x);
                match kind {
                    PoolKind::Max => {
                        for (&src, g) in route.iter().zip(gd) {
                            dx[src] += g;
                        }
                    }
                    PoolKind::Avg => {
                        for (plane, g) in dx.chunks_exact_mut(sp).zip(gd) {
                            plane.iter_mut().for_each(|d| *d += g / sp as f64);
                        }
                    }
                }
            }
            Op::GateSpatial { x, m } => {
                let s = self.value(*x).shape();
                let (n, c, sp) = (s[0], s[1], s[2] * s[3]);
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * sp;
                            for p in 0..sp {
                                dx[base + p] += gd[base + p] * mv[i * sp + p];
                            }
                        }
                    }
                }
                if self.wants(*m) {
                    let dm = self.slot(grads, *m);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * sp;
                            for p in 0..sp {
                                dm[i * sp + p] += gd[base + p] * xv[base + p];
                            }
                        }
                    }
                }
            }
            Op::GateChannel { x, m } => {
                let s = self.value(*x).shape();
                let sp = s[2] * s[3];
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    for (plane, (&mm, gp)) in dx.chunks_exact_mut(sp).zip(mv.iter().zip(gd.chunks_exact(sp))) {
                        plane.iter_mut().zip(gp).for_each(|(d, g)| *d += g * mm);
                    }
                }
                if self.wants(*m) {
                    let dm = self.slot(grads, *m);
                    for (d, (gp, xp)) in dm.iter_mut().zip(gd.chunks_exact(sp).zip(xv.chunks_exact(sp))) {
                        *d += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
                    }
                }
            }
            Op::FusedLoss { x, grad } => {
                let g0 = gd[0];
                self.slot(grads, *x)
                    .iter_mut()
                    .zip(grad)
                    .for_each(|(d, g)| *d += g0 * g);
            }
        }
    }
}
