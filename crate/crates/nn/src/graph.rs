//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Graph::backward`] walks the tape in reverse.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::ops::attention;
use crate::ops::conv::{self, ConvGeom};
use crate::ops::norm::{self, FeatureStats, GroupStats};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats },
    BatchNorm { x: Var, gamma: Var, beta: Var, stats: FeatureStats, batch_stats: bool },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Maximum(Var, Var),
    Mask { x: Var, mask: Vec<f64> },
    MeanSpatial(Var),
    ScaleChannels { x: Var, gate: Var },
    ScaleSpatial { x: Var, gate: Var },
    ToTokens(Var),
    MeanTokens(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    MaeLoss { pred: Var, target: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to every node that needed one.
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

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn needs_opt(&self, v: Option<Var>) -> bool {
        v.is_some_and(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = conv::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
        )?;
        let ng = self.needs(&[x, w]) || self.needs_opt(b);
        Ok(self.push(y, Op::Conv3d { x, w, b, geom }, ng))
    }

    /// Affine map over the last axis: `x[..., in] -> x W^T + b`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(shape_err("linear", format!("[..., {}]", ws.get(1).unwrap_or(&0)), &xs));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(shape_err("linear", format!("bias [{out_f}]"), self.shape(b)));
            }
        }
        let rows = self.value(x).len() / in_f;
        let mut y = vec![0.0; rows * out_f];
        crate::gemm::gemm(
            crate::gemm::Mat::new(self.value(x).data(), rows, in_f),
            crate::gemm::Mat::t(self.value(w).data(), out_f, in_f),
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in y.chunks_mut(out_f) {
                row.iter_mut().zip(bd).for_each(|(v, bb)| *v += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = out_f;
        let ng = self.needs(&[x, w]) || self.needs_opt(b);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Linear { x, w, b }, ng))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (y, stats) =
            norm::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            ng,
        ))
    }

    /// Batch normalization over `[N, F]`. With `running = None` batch statistics
    /// are used and the biased batch `(mean, var)` is returned alongside.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (y, stats) =
            norm::batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), running)?;
        let batch_stats = running.is_none();
        let observed = batch_stats.then(|| (stats.mean.clone(), stats.var.clone()));
        let ng = self.needs(&[x, gamma, beta]);
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                batch_stats,
            },
            ng,
        );
        Ok((v, observed))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.map(x, |v| v.max(0.0));
        let ng = self.needs(&[x]);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.map(x, sigmoid);
        let ng = self.needs(&[x]);
        self.push(y, Op::Sigmoid(x), ng)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?}", ta.shape()), tb.shape()));
        }
        Tensor::new(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.map(x, |v| v * factor);
        let ng = self.needs(&[x]);
        self.push(y, Op::Scale(x, factor), ng)
    }

    /// Element-wise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip("maximum", a, b, f64::max)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(y, Op::Maximum(a, b), ng))
    }

    /// Element-wise inverted dropout: kept values are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(self.apply_mask(x, mask))
    }

    /// Multiplies element-wise by a fixed mask.
    pub fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), mask.len(), "mask length");
        let y = Tensor::new(
            t.shape(),
            t.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )
        .expect("same shape");
        let ng = self.needs(&[x]);
        self.push(y, Op::Mask { x, mask }, ng)
    }

    /// Global average over spatial axes: `[N, C, ...] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 3 {
            return Err(shape_err("mean_spatial", "[N, C, ...]", t.shape()));
        }
        let (n, c, s) = (t.shape()[0], t.shape()[1], t.spatial_len());
        let y: Vec<f64> = t.data().chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n, c], y)?, Op::MeanSpatial(x), ng))
    }

    /// `x[N, C, ...] * gate[N, C]` broadcast over spatial axes.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (t, g) = (self.value(x), self.value(gate));
        if t.shape().len() < 3 || g.shape() != &t.shape()[..2] {
            return Err(shape_err("scale_channels", format!("gate {:?}", &t.shape()[..2.min(t.shape().len())]), g.shape()));
        }
        let s = t.spatial_len();
        let mut y = t.data().to_vec();
        for (chunk, &gv) in y.chunks_mut(s).zip(g.data()) {
            chunk.iter_mut().for_each(|v| *v *= gv);
        }
        let y = Tensor::new(t.shape(), y)?;
        let ng = self.needs(&[x, gate]);
        Ok(self.push(y, Op::ScaleChannels { x, gate }, ng))
    }

    /// `x[N, C, ...] * gate[N, 1, ...]` broadcast over channels.
    pub fn scale_spatial(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (t, g) = (self.value(x), self.value(gate));
        let ts = t.shape();
        let mut expected = ts.to_vec();
        if expected.len() >= 2 {
            expected[1] = 1;
        }
        if ts.len() < 3 || g.shape() != expected.as_slice() {
            return Err(shape_err("scale_spatial", format!("gate {expected:?}"), g.shape()));
        }
        let (c, s) = (ts[1], t.spatial_len());
        let mut y = t.data().to_vec();
        for (i, chunk) in y.chunks_mut(s).enumerate() {
            let gs = &g.data()[(i / c) * s..(i / c + 1) * s];
            chunk.iter_mut().zip(gs).for_each(|(v, gv)| *v *= gv);
        }
        let y = Tensor::new(ts, y)?;
        let ng = self.needs(&[x, gate]);
        Ok(self.push(y, Op::ScaleSpatial { x, gate }, ng))
    }

    /// `[N, C, D, H, W] -> [N, D*H*W, C]`: every spatial cell becomes a token.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 3 {
            return Err(shape_err("to_tokens", "[N, C, ...]", t.shape()));
        }
        let (n, c, s) = (t.shape()[0], t.shape()[1], t.spatial_len());
        let mut y = vec![0.0; t.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..s {
                    y[(b * s + p) * c + ch] = t.data()[(b * c + ch) * s + p];
                }
            }
        }
        let y = Tensor::new(&[n, s, c], y)?;
        let ng = self.needs(&[x]);
        Ok(self.push(y, Op::ToTokens(x), ng))
    }

    /// Token average: `[N, T, E] -> [N, E]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 3 {
            return Err(shape_err("mean_tokens", "[N, T, E]", t.shape()));
        }
        let (n, tk, e) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut y = vec![0.0; n * e];
        for b in 0..n {
            for i in 0..tk {
                let row = &t.data()[(b * tk + i) * e..][..e];
                y[b * e..(b + 1) * e].iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        y.iter_mut().for_each(|v| *v /= tk as f64);
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n, e], y)?, Op::MeanTokens(x), ng))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (y, probs) = attention::forward(self.value(q), self.value(k), self.value(v), heads)?;
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            y,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Mean absolute error against fixed targets; returns a one-element tensor.
    pub fn mae_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || target.is_empty() {
            return Err(shape_err("mae_loss", format!("{} targets", target.len()), p.shape()));
        }
        let loss = p.data().iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / target.len() as f64;
        let ng = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaeLoss {
                pred,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// `sum(x * weights)`; used to reduce an arbitrary output to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if t.len() != weights.len() {
            return Err(shape_err("weighted_sum", format!("{} values", weights.len()), t.shape()));
        }
        let s = t.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, ng))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop(&node.op, &gout, &mut grads);
            if matches!(node.op, Op::Leaf) || idx == output.0 {
                grads[idx] = Some(gout);
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, op: &Op, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let need = [self.needs_grad(*x), self.needs_grad(*w), self.needs_opt(*b)];
                let g = conv::backward(self.value(*x), self.value(*w), geom, gout, need);
                if let Some(dx) = g.dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = g.dw {
                    self.accum(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    self.accum(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (out_f, in_f) = (ws[0], ws[1]);
                let xt = self.value(*x);
                let rows = xt.len() / in_f;
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; xt.len()];
                    crate::gemm::gemm(
                        crate::gemm::Mat::new(gout, rows, out_f),
                        crate::gemm::Mat::new(self.value(*w).data(), out_f, in_f),
                        &mut dx,
                        false,
                    );
                    self.accum(grads, *x, dx);
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![0.0; out_f * in_f];
                    crate::gemm::gemm(
                        crate::gemm::Mat::t(gout, rows, out_f),
                        crate::gemm::Mat::new(xt.data(), rows, in_f),
                        &mut dw,
                        false,
                    );
                    self.accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let mut db = vec![0.0; out_f];
                        for row in gout.chunks(out_f) {
                            db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                        }
                        self.accum(grads, *b, db);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let g = norm::group_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    *groups,
                    stats,
                    gout,
                );
                self.accum(grads, *x, g.dx);
                self.accum(grads, *gamma, g.dgamma);
                self.accum(grads, *beta, g.dbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                batch_stats,
            } => {
                let g = norm::batch_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    stats,
                    *batch_stats,
                    gout,
                );
                self.accum(grads, *x, g.dx);
                self.accum(grads, *gamma, g.dgamma);
                self.accum(grads, *beta, g.dbeta);
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accum(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| {
                        let s = sigmoid(v);
                        g * s * (1.0 - s)
                    })
                    .collect();
                self.accum(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.to_vec());
                self.accum(grads, *b, gout.to_vec());
            }
            Op::Scale(x, f) => {
                self.accum(grads, *x, gout.iter().map(|g| g * f).collect());
            }
            Op::Maximum(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; gout.len()];
                let mut db = vec![0.0; gout.len()];
                for i in 0..gout.len() {
                    if ta[i] >= tb[i] {
                        da[i] = gout[i];
                    } else {
                        db[i] = gout[i];
                    }
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Mask { x, mask } => {
                self.accum(grads, *x, gout.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::MeanSpatial(x) => {
                let t = self.value(*x);
                let s = t.spatial_len();
                let mut d = vec![0.0; t.len()];
                for (chunk, g) in d.chunks_mut(s).zip(gout) {
                    chunk.fill(g / s as f64);
                }
                self.accum(grads, *x, d);
            }
            Op::ScaleChannels { x, gate } => {
                let (t, gt) = (self.value(*x), self.value(*gate));
                let s = t.spatial_len();
                if self.needs_grad(*x) {
                    let mut dx = gout.to_vec();
                    for (chunk, &gv) in dx.chunks_mut(s).zip(gt.data()) {
                        chunk.iter_mut().for_each(|v| *v *= gv);
                    }
                    self.accum(grads, *x, dx);
                }
                if self.needs_grad(*gate) {
                    let dg = gout
                        .chunks(s)
                        .zip(t.data().chunks(s))
                        .map(|(g, xv)| g.iter().zip(xv).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accum(grads, *gate, dg);
                }
            }
            Op::ScaleSpatial { x, gate } => {
                let (t, gt) = (self.value(*x), self.value(*gate));
                let (c, s) = (t.shape()[1], t.spatial_len());
                let mut dx = vec![0.0; t.len()];
                let mut dg = vec![0.0; gt.len()];
                for (i, ((dxc, gc), xc)) in dx
                    .chunks_mut(s)
                    .zip(gout.chunks(s))
                    .zip(t.data().chunks(s))
                    .enumerate()
                {
                    let b = i / c;
                    let gs = &gt.data()[b * s..(b + 1) * s];
                    let dgs = &mut dg[b * s..(b + 1) * s];
                    for p in 0..s {
                        dxc[p] = gc[p] * gs[p];
                        dgs[p] += gc[p] * xc[p];
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *gate, dg);
            }
            Op::ToTokens(x) => {
                let t = self.value(*x);
                let (n, c, s) = (t.shape()[0], t.shape()[1], t.spatial_len());
                let mut d = vec![0.0; t.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..s {
                            d[(b * c + ch) * s + p] = gout[(b * s + p) * c + ch];
                        }
                    }
                }
                self.accum(grads, *x, d);
            }
            Op::MeanTokens(x) => {
                let t = self.value(*x);
                let (n, tk, e) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut d = vec![0.0; t.len()];
                for b in 0..n {
                    for i in 0..tk {
                        for j in 0..e {
                            d[(b * tk + i) * e + j] = gout[b * e + j] / tk as f64;
                        }
                    }
                }
                self.accum(grads, *x, d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let g = attention::backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    probs,
                    gout,
                );
                self.accum(grads, *q, g.dq);
                self.accum(grads, *k, g.dk);
                self.accum(grads, *v, g.dv);
            }
            Op::MaeLoss { pred, target } => {
                let n = target.len() as f64;
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| gout[0] * sign(p - t) / n)
                    .collect();
                self.accum(grads, *pred, d);
            }
            Op::WeightedSum { x, weights } => {
                self.accum(grads, *x, weights.iter().map(|w| w * gout[0]).collect());
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
