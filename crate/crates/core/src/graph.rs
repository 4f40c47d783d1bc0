//! A reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and returns gradients for every node that
//! depends on a leaf created with `requires_grad`.

use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, ConvGeom, Mat, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ReflectionPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Concat(Var, Var),
    AvgPool2(Var),
    Mean(Var),
    Abs(Var),
    Square(Var),
    BceWithLogits {
        x: Var,
        target: f64,
    },
    L1 {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).shape();
        let [o, wc, k, k2] = self.value(w).shape();
        if wc != c || k != k2 {
            return Err(Error::Shape(format!(
                "conv weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let g = ConvGeom::new(c, h, wd, k, stride, pad)?;
        let mut out = Tensor::zeros([n, o, g.out_h, g.out_w]);
        let mut col = vec![0.0; g.col_rows() * g.col_cols()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let out_sz = o * g.col_cols();
            for i in 0..n {
                im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &g, &mut col);
                let dst = &mut out.data_mut()[i * out_sz..(i + 1) * out_sz];
                if let Some(bias) = bias {
                    for (oc, chunk) in dst.chunks_mut(g.col_cols()).enumerate() {
                        chunk.fill(bias[oc]);
                    }
                }
                gemm(
                    Mat::new(wv, o, g.col_rows()),
                    Mat::new(&col, g.col_rows(), g.col_cols()),
                    1.0,
                    dst,
                );
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        ))
    }

    /// Transposed convolution with weight layout `(C_in, C_out, k, k)`.
    /// Output size is `(H-1)·stride − 2·pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).shape();
        let [wc, o, k, k2] = self.value(w).shape();
        if wc != c || k != k2 || out_pad >= stride.max(1) {
            return Err(Error::Shape(format!(
                "transposed conv weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let oh = ((h - 1) * stride + k + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::Shape("transposed conv padding too large".into()))?;
        let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
        let g = transposed_geom(o, oh, ow, k, stride, pad, h, wd);
        let mut out = Tensor::zeros([n, o, oh, ow]);
        let mut col = vec![0.0; g.col_rows() * g.col_cols()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let out_sz = o * oh * ow;
            for i in 0..n {
                gemm(
                    Mat::new(wv, c, g.col_rows()).t(),
                    Mat::new(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h * wd),
                    0.0,
                    &mut col,
                );
                let dst = &mut out.data_mut()[i * out_sz..(i + 1) * out_sz];
                col2im(&col, &g, dst);
                if let Some(bias) = bias {
                    for (oc, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bias[oc]);
                    }
                }
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        ))
    }

    pub fn reflection_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape();
        if pad >= h || pad >= w {
            return Err(Error::Shape(format!(
                "reflection pad {pad} needs input larger than {h}x{w}"
            )));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros([n, c, ph, pw]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for p in 0..n * c {
                for y in 0..ph {
                    let sy = reflect(y as isize - pad as isize, h);
                    for xx in 0..pw {
                        let sx = reflect(xx as isize - pad as isize, w);
                        dst[(p * ph + y) * pw + xx] = src[(p * h + sy) * w + sx];
                    }
                }
            }
        }
        Ok(self.push(out, Op::ReflectionPad { x, pad }, &[x]))
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        let hw = h * w;
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in out.data_mut().chunks_mut(hw) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::InstanceNorm { x, inv_std }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Multiplies by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Shape("dropout mask length".into()));
        }
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, m)| *v *= m);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(x, y)| *x -= y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k), &[x])
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).shape();
        let [nb, cb, hb, wb] = self.value(b).shape();
        if na != nb || ha != hb || wa != wb {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for i in 0..na {
            data.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::from_vec([na, ca + cb, ha, wa], data)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape();
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("cannot pool a {h}x{w} input")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for p in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let s = |dy: usize, dx: usize| src[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                        dst[(p * oh + y) * ow + xx] = 0.25 * (s(0, 0) + s(0, 1) + s(1, 0) + s(1, 1));
                    }
                }
            }
        }
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// Mean binary cross-entropy of `σ(x)` against a constant target.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Var {
        let v = self.value(x);
        let total: f64 = v
            .data()
            .iter()
            .map(|&z| softplus(z) - target * z)
            .sum();
        let out = Tensor::scalar(total / v.numel() as f64);
        self.push(out, Op::BceWithLogits { x, target }, &[x])
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "l1")?;
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let out = Tensor::scalar(total / self.value(a).numel() as f64);
        Ok(self.push(out, Op::L1 { a, b }, &[a, b]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        g: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
        out: &Tensor,
    ) {
        if !self.wants(x) {
            return;
        }
        let xv = self.value(x);
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(out.data())
            .map(|((&g, &x), &y)| f(g, x, y))
            .collect();
        let t = Tensor::from_vec(xv.shape(), data).expect("shape preserved");
        self.accumulate(grads, x, t);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let [n, c, h, wd] = self.value(x).shape();
                let [o, _, k, _] = self.value(w).shape();
                let geom = ConvGeom::new(c, h, wd, k, stride, pad)?;
                let cols = geom.col_cols();
                let mut col = vec![0.0; geom.col_rows() * cols];
                let mut dw = Tensor::zeros(self.value(w).shape());
                let mut dx = Tensor::zeros(self.value(x).shape());
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                for i in 0..n {
                    let gi = &g.data()[i * o * cols..(i + 1) * o * cols];
                    if self.wants(w) {
                        im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut col);
                        gemm(
                            Mat::new(gi, o, cols),
                            Mat::new(&col, geom.col_rows(), cols).t(),
                            1.0,
                            dw.data_mut(),
                        );
                    }
                    if self.wants(x) {
                        gemm(
                            Mat::new(wv, o, geom.col_rows()).t(),
                            Mat::new(gi, o, cols),
                            0.0,
                            &mut col,
                        );
                        col2im(
                            &col,
                            &geom,
                            &mut dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd],
                        );
                    }
                }
                if let Some(b) = b {
                    self.accumulate(grads, b, channel_sums(g));
                }
                self.accumulate(grads, w, dw);
                self.accumulate(grads, x, dx);
            }
            &Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let [n, c, h, wd] = self.value(x).shape();
                let [_, o, k, _] = self.value(w).shape();
                let [_, _, oh, ow] = node.value.shape();
                let geom = transposed_geom(o, oh, ow, k, stride, pad, h, wd);
                let rows = geom.col_rows();
                let mut col = vec![0.0; rows * geom.col_cols()];
                let mut dw = Tensor::zeros(self.value(w).shape());
                let mut dx = Tensor::zeros(self.value(x).shape());
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                for i in 0..n {
                    im2col(&g.data()[i * o * oh * ow..(i + 1) * o * oh * ow], &geom, &mut col);
                    let colm = Mat::new(&col, rows, h * wd);
                    if self.wants(w) {
                        gemm(
                            Mat::new(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h * wd),
                            colm.t(),
                            1.0,
                            dw.data_mut(),
                        );
                    }
                    if self.wants(x) {
                        gemm(
                            Mat::new(wv, c, rows),
                            colm,
                            0.0,
                            &mut dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd],
                        );
                    }
                }
                if let Some(b) = b {
                    self.accumulate(grads, b, channel_sums(g));
                }
                self.accumulate(grads, w, dw);
                self.accumulate(grads, x, dx);
            }
            &Op::ReflectionPad { x, pad } => {
                let [n, c, h, w] = self.value(x).shape();
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut dx = Tensor::zeros([n, c, h, w]);
                let d = dx.data_mut();
                for p in 0..n * c {
                    for y in 0..ph {
                        let sy = reflect(y as isize - pad as isize, h);
                        for xx in 0..pw {
                            let sx = reflect(xx as isize - pad as isize, w);
                            d[(p * h + sy) * w + sx] += g.data()[(p * ph + y) * pw + xx];
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let [_, _, h, w] = node.value.shape();
                let hw = h * w;
                let mut dx = Tensor::zeros(node.value.shape());
                for (p, ((dxp, gp), yp)) in dx
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(g.data().chunks(hw))
                    .zip(node.value.data().chunks(hw))
                    .enumerate()
                {
                    let sum_g: f64 = gp.iter().sum();
                    let sum_gy: f64 = gp.iter().zip(yp).map(|(a, b)| a * b).sum();
                    let k = inv_std[p] / hw as f64;
                    for j in 0..hw {
                        dxp[j] = k * (hw as f64 * gp[j] - sum_g - yp[j] * sum_gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::Relu(x) => {
                self.elementwise(grads, x, g, |g, x, _| if x > 0.0 { g } else { 0.0 }, &node.value)
            }
            &Op::LeakyRelu(x, s) => self.elementwise(
                grads,
                x,
                g,
                |g, x, _| if x > 0.0 { g } else { s * g },
                &node.value,
            ),
            &Op::Tanh(x) => self.elementwise(grads, x, g, |g, _, y| g * (1.0 - y * y), &node.value),
            &Op::Sigmoid(x) => {
                self.elementwise(grads, x, g, |g, _, y| g * y * (1.0 - y), &node.value)
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                self.accumulate(grads, *x, dx);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Scale(x, k) => self.accumulate(grads, x, g.map(|v| v * k)),
            &Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(a).shape();
                let cb = self.value(b).shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    da.extend_from_slice(&g.data()[base..base + ca * hw]);
                    db.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, a, Tensor::from_vec([n, ca, h, w], da)?);
                self.accumulate(grads, b, Tensor::from_vec([n, cb, h, w], db)?);
            }
            &Op::AvgPool2(x) => {
                let [n, c, h, w] = self.value(x).shape();
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = Tensor::zeros([n, c, h, w]);
                let d = dx.data_mut();
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * g.data()[(p * oh + y) * ow + xx];
                            for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                d[(p * h + 2 * y + dy) * w + 2 * xx + dxo] += v;
                            }
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::Mean(x) => {
                let xv = self.value(x);
                let v = g.item() / xv.numel() as f64;
                self.accumulate(grads, x, Tensor::full(xv.shape(), v));
            }
            &Op::Abs(x) => self.elementwise(grads, x, g, |g, x, _| g * sign(x), &node.value),
            &Op::Square(x) => self.elementwise(grads, x, g, |g, x, _| 2.0 * g * x, &node.value),
            &Op::BceWithLogits { x, target } => {
                let xv = self.value(x);
                let k = g.item() / xv.numel() as f64;
                self.accumulate(grads, x, xv.map(|z| k * (sigmoid(z) - target)));
            }
            &Op::L1 { a, b } => {
                let av = self.value(a);
                let k = g.item() / av.numel() as f64;
                let data = av
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(x, y)| k * sign(x - y))
                    .collect();
                let da = Tensor::from_vec(av.shape(), data)?;
                if self.wants(b) {
                    self.accumulate(grads, b, da.map(|v| -v));
                }
                self.accumulate(grads, a, da);
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn transposed_geom(
    out_c: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
) -> ConvGeom {
    ConvGeom {
        channels: out_c,
        height: oh,
        width: ow,
        kernel: k,
        stride,
        pad,
        out_h: h,
        out_w: w,
    }
}

fn channel_sums(g: &Tensor) -> Tensor {
    let [n, c, h, w] = g.shape();
    let mut sums = vec![0.0; c];
    for (idx, chunk) in g.data().chunks(h * w).enumerate() {
        sums[idx % c] += chunk.iter().sum::<f64>();
    }
    let _ = n;
    Tensor::from_vec([c, 1, 1, 1], sums).expect("bias shape")
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
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
