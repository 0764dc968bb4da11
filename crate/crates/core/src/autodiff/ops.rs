use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::tape::{Node, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// A recorded operation and the node ids of its inputs.
pub(crate) enum Op {
    Leaf,
    Conv2d { input: usize, weight: usize, bias: usize, geom: ConvGeom },
    Relu(usize),
    Sigmoid(usize),
    AvgPool { x: usize, dims: (usize, usize, usize, usize), k: usize, stride: usize },
    Gap { x: usize, hw: usize },
    Softmax { x: usize, cols: usize },
    CrossEntropy { scores: usize, labels: Vec<usize>, cols: usize },
    /// `b` is either the same shape as `a` or a single-channel map broadcast
    /// across `channels`.
    Mul { a: usize, b: usize, broadcast: Option<(usize, usize, usize)> },
    Upsample { x: usize, planes: usize, from: (usize, usize), to: (usize, usize) },
    SelectChannel { x: usize, index: Vec<usize>, channels: usize, hw: usize },
    OneMinus(usize),
    Add(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Mean(usize),
    Sum(usize),
}

impl Op {
    pub(crate) fn backward(
        &self,
        nodes: &[Node],
        out: &Tensor,
        g: &[f64],
        wants: &dyn Fn(usize) -> bool,
        fault: bool,
    ) -> Vec<(usize, Vec<f64>)> {
        let val = |i: usize| nodes[i].value.data();
        let mut res = Vec::new();
        match *self {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, ref geom } => {
                let want = [wants(input), wants(weight), wants(bias)];
                let grads = kernels::conv2d_backward(geom, val(input), val(weight), g, want);
                if let Some(gi) = grads.input {
                    res.push((input, gi));
                }
                if let Some(mut gw) = grads.weight {
                    if fault {
                        gw.iter_mut().for_each(|v| *v *= 1.01);
                    }
                    res.push((weight, gw));
                }
                if let Some(gb) = grads.bias {
                    res.push((bias, gb));
                }
            }
            Op::Relu(x) => {
                let gx = val(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                res.push((x, gx));
            }
            Op::Sigmoid(x) => {
                let gx = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                res.push((x, gx));
            }
            Op::AvgPool { x, dims, k, stride } => {
                res.push((x, kernels::avg_pool_backward(g, dims, k, stride)));
            }
            Op::Gap { x, hw } => {
                let inv = 1.0 / hw as f64;
                let gx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, hw))
                    .collect();
                res.push((x, gx));
            }
            Op::Softmax { x, cols } => {
                let mut gx = Vec::with_capacity(g.len());
                for (y, gr) in out.data().chunks_exact(cols).zip(g.chunks_exact(cols)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(y.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                res.push((x, gx));
            }
            Op::CrossEntropy { scores, ref labels, cols } => {
                let scale = g[0] / labels.len() as f64;
                let mut gx = kernels::softmax_rows(val(scores), cols);
                for (row, &label) in gx.chunks_exact_mut(cols).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                res.push((scores, gx));
            }
            Op::Mul { a, b, broadcast } => {
                let (av, bv) = (val(a), val(b));
                match broadcast {
                    None => {
                        if wants(a) {
                            res.push((a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                        }
                        if wants(b) {
                            res.push((b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                        }
                    }
                    Some((n, c, hw)) => {
                        if wants(a) {
                            let mut ga = Vec::with_capacity(g.len());
                            for s in 0..n {
                                let mask = &bv[s * hw..(s + 1) * hw];
                                for ch in 0..c {
                                    let off = (s * c + ch) * hw;
                                    ga.extend(g[off..off + hw].iter().zip(mask).map(|(x, y)| x * y));
                                }
                            }
                            res.push((a, ga));
                        }
                        if wants(b) {
                            let mut gb = vec![0.0; n * hw];
                            for s in 0..n {
                                let acc = &mut gb[s * hw..(s + 1) * hw];
                                for ch in 0..c {
                                    let off = (s * c + ch) * hw;
                                    for ((d, &gv), &x) in acc.iter_mut().zip(&g[off..off + hw]).zip(&av[off..off + hw]) {
                                        *d += gv * x;
                                    }
                                }
                            }
                            res.push((b, gb));
                        }
                    }
                }
            }
            Op::Upsample { x, planes, from, to } => {
                res.push((x, kernels::upsample_backward(g, planes, from, to)));
            }
            Op::SelectChannel { x, ref index, channels, hw } => {
                let mut gx = vec![0.0; index.len() * channels * hw];
                for (s, &c) in index.iter().enumerate() {
                    let off = (s * channels + c) * hw;
                    gx[off..off + hw].copy_from_slice(&g[s * hw..(s + 1) * hw]);
                }
                res.push((x, gx));
            }
            Op::OneMinus(x) => res.push((x, g.iter().map(|v| -v).collect())),
            Op::Add(a, b) => {
                if wants(a) {
                    res.push((a, g.to_vec()));
                }
                if wants(b) {
                    res.push((b, g.to_vec()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    res.push((a, g.iter().zip(bv).map(|(gv, d)| gv / d).collect()));
                }
                if wants(b) {
                    let gb = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gv, (n, d))| -gv * n / (d * d))
                        .collect();
                    res.push((b, gb));
                }
            }
            Op::AddScalar(x) => res.push((x, g.to_vec())),
            Op::Scale(x, c) => res.push((x, g.iter().map(|v| v * c).collect())),
            Op::Mean(x) => {
                let len = nodes[x].value.len();
                res.push((x, vec![g[0] / len as f64; len]));
            }
            Op::Sum(x) => res.push((x, vec![g[0]; nodes[x].value.len()])),
        }
        res.retain(|(i, _)| wants(*i));
        res
    }
}

impl<'t> Var<'t> {
    fn record(&self, inputs: &[Var<'t>], out: Tensor, op: Op) -> Var<'t> {
        debug_assert!(
            !inputs.iter().all(|v| v.value().all_finite()) || out.all_finite(),
            "non-finite result from finite inputs"
        );
        let rg = inputs.iter().any(|v| v.requires_grad());
        self.tape.push(Rc::new(out), op, rg)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("variables recorded on different tapes".into()))
        }
    }

    /// 2-D cross-correlation of `self` (`[N,Ci,H,W]`) with `weight`
    /// (`[Co,Ci,kh,kw]`) plus a per-channel `bias`.
    pub fn conv2d(&self, weight: Var<'t>, bias: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let geom = ConvGeom::new(&x, &w, &b, stride, padding)?;
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
        let out = Tensor::new([geom.n, geom.co, geom.ho, geom.wo], out)?;
        Ok(self.record(
            &[*self, weight, bias],
            out,
            Op::Conv2d { input: self.id, weight: weight.id, bias: bias.id, geom },
        ))
    }

    /// Elementwise `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&self) -> Var<'t> {
        let x = self.value();
        let out = if self.tape.branching() {
            let active = self.tape.branch(x.data().iter().map(|&v| v > 0.0).collect());
            let data = x.data().iter().zip(active).map(|(&v, a)| if a { v } else { 0.0 }).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        } else {
            x.map(|v| if v > 0.0 { v } else { 0.0 })
        };
        self.record(&[*self], out, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.value().map(kernels::sigmoid);
        self.record(&[*self], out, Op::Sigmoid(self.id))
    }

    /// Mean pooling over `k`×`k` windows. With `k == stride` the spatial
    /// dims must divide evenly.
    pub fn avg_pool2d(&self, k: usize, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let dims @ (n, c, h, w) = x.dims4()?;
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(Error::Dimension(format!(
                "avg_pool2d: window {k} stride {stride} does not fit {h}x{w}"
            )));
        }
        if k == stride && (h % stride != 0 || w % stride != 0) {
            return Err(Error::Dimension(format!(
                "avg_pool2d: {h}x{w} is not divisible by {stride}"
            )));
        }
        let (ho, wo) = (kernels::pool_out(h, k, stride), kernels::pool_out(w, k, stride));
        let out = Tensor::new([n, c, ho, wo], kernels::avg_pool_forward(x.data(), dims, k, stride))?;
        Ok(self.record(&[*self], out, Op::AvgPool { x: self.id, dims, k, stride }))
    }

    /// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::Dimension("global_avg_pool on empty spatial dims".into()));
        }
        let inv = 1.0 / hw as f64;
        let out: Vec<f64> = x.data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() * inv).collect();
        let out = Tensor::new([n, c], out)?;
        Ok(self.record(&[*self], out, Op::Gap { x: self.id, hw }))
    }

    /// Row-wise softmax of a `[N,C]` matrix.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c) = x.dims2()?;
        let out = Tensor::new([n, c], kernels::softmax_rows(x.data(), c))?;
        Ok(self.record(&[*self], out, Op::Softmax { x: self.id, cols: c }))
    }

    /// Mean over rows of `logsumexp(row) - row[label]`, i.e. the negative
    /// log of the softmax probability at the label, without forming the
    /// softmax explicitly.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c) = x.dims2()?;
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let total: f64 = x
            .data()
            .chunks_exact(c)
            .zip(labels)
            .map(|(row, &l)| kernels::logsumexp(row) - row[l])
            .sum();
        let out = Tensor::scalar(total / n as f64);
        Ok(self.record(
            &[*self],
            out,
            Op::CrossEntropy { scores: self.id, labels: labels.to_vec(), cols: c },
        ))
    }

    /// Hadamard product. `other` may be a single-channel `[N,1,H,W]` map,
    /// which is applied to every channel of `self`.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let broadcast = if a.shape() == b.shape() {
            None
        } else {
            match (a.dims4(), b.dims4()) {
                (Ok((n, c, h, w)), Ok((bn, 1, bh, bw))) if (n, h, w) == (bn, bh, bw) => Some((n, c, h * w)),
                _ => {
                    return Err(Error::Dimension(format!(
                        "mul: shapes {:?} and {:?} are incompatible",
                        a.shape(),
                        b.shape()
                    )))
                }
            }
        };
        let out = match broadcast {
            None => a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
            Some((n, c, hw)) => {
                let mut out = Vec::with_capacity(a.len());
                for s in 0..n {
                    let mask = &b.data()[s * hw..(s + 1) * hw];
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        out.extend(a.data()[off..off + hw].iter().zip(mask).map(|(x, y)| x * y));
                    }
                }
                out
            }
        };
        let out = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.record(&[*self, other], out, Op::Mul { a: self.id, b: other.id, broadcast }))
    }

    /// Corner-aligned bilinear resize of every plane to `height`×`width`.
    pub fn bilinear_upsample(&self, height: usize, width: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if height < h || width < w {
            return Err(Error::Dimension(format!(
                "bilinear_upsample: target {height}x{width} smaller than {h}x{w}"
            )));
        }
        let out = kernels::upsample_forward(x.data(), n * c, (h, w), (height, width));
        let out = Tensor::new([n, c, height, width], out)?;
        Ok(self.record(
            &[*self],
            out,
            Op::Upsample { x: self.id, planes: n * c, from: (h, w), to: (height, width) },
        ))
    }

    /// Same values, cut off from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.value(), Op::Leaf, false)
    }

    /// Picks channel `index[n]` from sample `n`: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn select_channel(&self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if index.len() != n {
            return Err(Error::Dimension(format!(
                "select_channel: {n} samples but {} indices",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::Index(format!("channel {bad} out of range for {c} channels")));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * hw);
        for (s, &ch) in index.iter().enumerate() {
            let off = (s * c + ch) * hw;
            out.extend_from_slice(&x.data()[off..off + hw]);
        }
        let out = Tensor::new([n, 1, h, w], out)?;
        Ok(self.record(
            &[*self],
            out,
            Op::SelectChannel { x: self.id, index: index.to_vec(), channels: c, hw },
        ))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&self) -> Var<'t> {
        let out = self.value().map(|v| 1.0 - v);
        self.record(&[*self], out, Op::OneMinus(self.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_values(&other, "add")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.record(&[*self, other], out, Op::Add(self.id, other.id)))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_values(&other, "div")?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        let out = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.record(&[*self, other], out, Op::Div(self.id, other.id)))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.record(&[*self], out, Op::AddScalar(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.record(&[*self], out, Op::Scale(self.id, c))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let out = Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64);
        self.record(&[*self], out, Op::Mean(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().data().iter().sum());
        self.record(&[*self], out, Op::Sum(self.id))
    }

    fn binary_values(&self, other: &Var<'t>, what: &str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        Ok((a, b))
    }
}
