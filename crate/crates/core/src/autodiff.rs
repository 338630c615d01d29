//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed at
//! construction time and [`Graph::backward`] walks the tape in reverse.
//! Leaves are either trainable (`param`) or constants; nodes that do not
//! depend on a trainable leaf are skipped during the backward sweep.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    LogClamped(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Row(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Upsample2x(Var),
    Bilinear {
        x: Var,
        h: usize,
        w: usize,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ChannelWeightedSum {
        f: Var,
        alpha: Var,
    },
    SpatialMean(Var),
    MinMaxNormalize {
        x: Var,
        // per item: (argmin, argmax, range) or None when degenerate
        stats: Vec<Option<(usize, usize, f64)>>,
    },
    Bce {
        pred: Var,
        target: Tensor,
        eps: f64,
    },
    KlStdNormal {
        mu: Var,
        logvar: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        eps: f64,
    },
    WeightedItemMean {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Degenerate-range cutoff for [`Graph::minmax_normalize`].
pub const MINMAX_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a), &[a])
    }

    /// `c - a`, the complement used by attention inversion.
    pub fn rsub(&mut self, c: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.offset(neg, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// `ln(clamp(a, eps, 1 - eps))`; zero gradient where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(eps, 1.0 - eps).ln());
        self.push(out, Op::LogClamped(a, eps), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Row `r` of a 2-D tensor, kept 2-D as `(1, n)`.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || r >= t.dim(0) {
            return Err(Error::shape(format!("row {r} of {:?}", t.shape())));
        }
        let n = t.dim(1);
        let out = Tensor::from_vec(&[1, n], t.data()[r * n..(r + 1) * n].to_vec())?;
        Ok(self.push(out, Op::Row(a, r), &[a]))
    }

    /// Square-kernel convolution: `x (B,Cin,H,W)`, `w (Cout,Cin,k,k)`, `b (Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d: input {xs:?}, weight {ws:?}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(Error::shape(format!("conv2d: kernel {} exceeds input {xs:?}", ws[2])));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(format!("conv2d: bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        let data = tensor::conv2d_forward(
            &geom,
            xs[0],
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_vec(&[xs[0], geom.c_out, geom.out_h(), geom.out_w()], data)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Per-sample, per-channel normalization over the spatial axes with an
    /// affine `(C)` gain and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape(format!("instance_norm: input {xs:?}")));
        }
        let (bsz, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; bsz * c];
        let mut out = vec![0.0; xv.len()];
        for plane in 0..bsz * c {
            let ch = plane % c;
            let src = &xv[plane * hw..(plane + 1) * hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[plane] = is;
            for i in 0..hw {
                let xh = (src[i] - mean) * is;
                xhat[plane * hw + i] = xh;
                out[plane * hw + i] = g[ch] * xh + be[ch];
            }
        }
        let out = Tensor::from_vec(&xs, out)?;
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling of a `(B,C,H,W)` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("upsample2x: {xs:?}")));
        }
        let data = tensor::upsample2x_forward(xs[0] * xs[1], xs[2], xs[3], self.value(x).data());
        let out = Tensor::from_vec(&[xs[0], xs[1], 2 * xs[2], 2 * xs[3]], data)?;
        Ok(self.push(out, Op::Upsample2x(x), &[x]))
    }

    /// Bilinear resize of the trailing two axes to `(oh, ow)`.
    pub fn bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(format!("bilinear: {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let data = tensor::bilinear_forward(planes, h, w, oh, ow, self.value(x).data());
        let mut shape = xs[..xs.len() - 2].to_vec();
        shape.extend([oh, ow]);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Bilinear { x, h, w }, &[x]))
    }

    /// `(m,k) x (k,n)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; sa[0] * sb[1]];
        tensor::gemm(sa[0], sa[1], sb[1], self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let out = Tensor::from_vec(&[sa[0], sb[1]], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Fully connected layer `x (B,in) . w^T (out,in) + b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || self.shape(b) != [sw[0]] {
            return Err(Error::shape(format!("linear: x {sx:?}, w {sw:?}")));
        }
        let (bsz, out_f) = (sx[0], sw[0]);
        let bias = self.value(b).data();
        let mut out: Vec<f64> = (0..bsz).flat_map(|_| bias.iter().copied()).collect();
        tensor::gemm(bsz, sx[1], out_f, self.value(x).data(), false, self.value(w).data(), true, &mut out, 1.0);
        let out = Tensor::from_vec(&[bsz, out_f], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// `out[b] = sum_k alpha[k] * f[b,k]` for `f (B,K,H,W)`, `alpha (K)`;
    /// returns `(B,H,W)`.
    pub fn channel_weighted_sum(&mut self, f: Var, alpha: Var) -> Result<Var> {
        let fs = self.shape(f).to_vec();
        if fs.len() != 4 || self.shape(alpha) != [fs[1]] {
            return Err(Error::shape(format!(
                "channel_weighted_sum: features {fs:?}, weights {:?}",
                self.shape(alpha)
            )));
        }
        let (bsz, k, hw) = (fs[0], fs[1], fs[2] * fs[3]);
        let fv = self.value(f).data();
        let av = self.value(alpha).data();
        let mut out = vec![0.0; bsz * hw];
        for b in 0..bsz {
            let dst = &mut out[b * hw..(b + 1) * hw];
            for (ch, &a) in av.iter().enumerate() {
                let src = &fv[(b * k + ch) * hw..(b * k + ch + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        let out = Tensor::from_vec(&[bsz, fs[2], fs[3]], out)?;
        Ok(self.push(out, Op::ChannelWeightedSum { f, alpha }, &[f, alpha]))
    }

    /// Mean over the trailing two axes of a `(K,H,W)` tensor, giving `(K)`.
    pub fn spatial_mean(&mut self, g: Var) -> Result<Var> {
        let gs = self.shape(g).to_vec();
        if gs.len() != 3 {
            return Err(Error::shape(format!("spatial_mean: {gs:?}")));
        }
        let hw = gs[1] * gs[2];
        let out: Vec<f64> = self
            .value(g)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::from_vec(&[gs[0]], out)?;
        Ok(self.push(out, Op::SpatialMean(g), &[g]))
    }

    /// Per-item min-max rescaling to `[0,1]` over all non-leading axes. Items
    /// whose range is below [`MINMAX_EPS`] map to all zeros.
    pub fn minmax_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(Error::shape("minmax_normalize on a scalar"));
        }
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(Error::Numeric("non-finite values entering attention normalization".into()));
        }
        let n: usize = xs[1..].iter().product();
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(xs[0]);
        for (item, src) in xv.data().chunks(n).enumerate() {
            let (mut lo, mut hi) = (0usize, 0usize);
            for (i, &v) in src.iter().enumerate() {
                if v < src[lo] {
                    lo = i;
                }
                if v > src[hi] {
                    hi = i;
                }
            }
            let range = src[hi] - src[lo];
            if range < MINMAX_EPS {
                stats.push(None);
                continue;
            }
            let dst = &mut out[item * n..(item + 1) * n];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = ((v - src[lo]) / range).clamp(0.0, 1.0);
            }
            stats.push(Some((lo, hi, range)));
        }
        let out = Tensor::from_vec(&xs, out)?;
        Ok(self.push(out, Op::MinMaxNormalize { x, stats }, &[x]))
    }

    /// Mean binary cross-entropy of `pred` against a constant `target`, with
    /// `pred` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        same_shape("bce", self.value(pred), target)?;
        let p = self.value(pred).data();
        let total: f64 = p
            .iter()
            .zip(target.data())
            .map(|(&q, &t)| {
                let q = q.clamp(eps, 1.0 - eps);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum();
        let out = Tensor::scalar(total / p.len() as f64);
        Ok(self.push(
            out,
            Op::Bce {
                pred,
                target: target.clone(),
                eps,
            },
            &[pred],
        ))
    }

    /// `KL(N(mu, exp(logvar)) || N(0, I))` summed over non-batch axes and
    /// averaged over the batch.
    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        same_shape("kl", self.value(mu), self.value(logvar))?;
        let bsz = self.shape(mu).first().copied().unwrap_or(1).max(1);
        let total: f64 = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
            .sum();
        let out = Tensor::scalar(total / bsz as f64);
        Ok(self.push(out, Op::KlStdNormal { mu, logvar }, &[mu, logvar]))
    }

    /// Mean categorical cross-entropy `-ln clamp(softmax(logits)[label], eps, 1)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {ls:?} with {} labels",
                labels.len()
            )));
        }
        let classes = ls[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::arg(format!("label {bad} outside {classes} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (i, row) in lv.chunks(classes).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (c, v) in row.iter().enumerate() {
                probs[i * classes + c] = (v - m).exp() / z;
            }
            total -= probs[i * classes + labels[i]].clamp(eps, 1.0).ln();
        }
        let out = Tensor::scalar(total / labels.len().max(1) as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                eps,
            },
            &[logits],
        ))
    }

    /// `(1/B) sum_i weights[i] * mean(x[i])` over the leading axis.
    pub fn weighted_item_mean(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || xs[0] != weights.len() || weights.is_empty() {
            return Err(Error::shape(format!(
                "weighted_item_mean: {xs:?} with {} weights",
                weights.len()
            )));
        }
        let n: usize = xs[1..].iter().product();
        let total: f64 = self
            .value(x)
            .data()
            .chunks(n)
            .zip(weights)
            .map(|(c, w)| w * c.iter().sum::<f64>() / n as f64)
            .sum();
        let out = Tensor::scalar(total / weights.len() as f64);
        Ok(self.push(
            out,
            Op::WeightedItemMean {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gout.clone());
                if self.needs(*b) {
                    self.accum(grads, *b, gout.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, gout.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, gout.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, gout.map(|g| g * s)),
            Op::Offset(a) => self.accum(grads, *a, gout.clone()),
            Op::Exp(a) => self.accum(grads, *a, gout.zip_map(&node.value, |g, y| g * y)),
            Op::Sigmoid(a) => self.accum(grads, *a, gout.zip_map(&node.value, |g, y| g * y * (1.0 - y))),
            Op::Relu(a) => self.accum(
                grads,
                *a,
                gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::LeakyRelu(a, slope) => self.accum(
                grads,
                *a,
                gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { g * slope }),
            ),
            Op::LogClamped(a, eps) => {
                let (lo, hi) = (*eps, 1.0 - eps);
                self.accum(
                    grads,
                    *a,
                    gout.zip_map(self.value(*a), |g, x| if x > lo && x < hi { g / x } else { 0.0 }),
                )
            }
            Op::Sum(a) => self.accum(grads, *a, Tensor::full(self.shape(*a), go[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accum(grads, *a, Tensor::full(self.shape(*a), go[0] / n))
            }
            Op::Reshape(a) => self.accum(grads, *a, gout.clone().reshape(self.shape(*a))?),
            Op::Row(a, r) => {
                let mut g = Tensor::zeros(self.shape(*a));
                let n = go.len();
                g.data_mut()[r * n..(r + 1) * n].copy_from_slice(go);
                self.accum(grads, *a, g);
            }
            Op::Conv2d { x, w, b, geom } => {
                let batch = self.shape(*x)[0];
                let (dx, dw, db) = tensor::conv2d_backward(
                    geom,
                    batch,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    go,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
                }
                if self.needs(*w) {
                    self.accum(grads, *w, Tensor::from_vec(self.shape(*w), dw)?);
                }
                if let Some(b) = b {
                    self.accum(grads, *b, Tensor::from_vec(self.shape(*b), db)?);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; go.len()];
                for plane in 0..inv_std.len() {
                    let ch = plane % c;
                    let g = &go[plane * hw..(plane + 1) * hw];
                    let xh = &xhat[plane * hw..(plane + 1) * hw];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for i in 0..hw {
                        sum_g += g[i];
                        sum_gx += g[i] * xh[i];
                    }
                    dgamma[ch] += sum_gx;
                    dbeta[ch] += sum_g;
                    let k = gv[ch] * inv_std[plane] / hw as f64;
                    for i in 0..hw {
                        dx[plane * hw + i] = k * (hw as f64 * g[i] - sum_g - xh[i] * sum_gx);
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(xs, dx)?);
                self.accum(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accum(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let dx = tensor::upsample2x_backward(xs[0] * xs[1], xs[2], xs[3], go);
                self.accum(grads, *x, Tensor::from_vec(xs, dx)?);
            }
            Op::Bilinear { x, h, w } => {
                let xs = self.shape(*x);
                let os = node.value.shape();
                let (oh, ow) = (os[os.len() - 2], os[os.len() - 1]);
                let planes = go.len() / (oh * ow);
                let dx = tensor::bilinear_backward(planes, *h, *w, oh, ow, go);
                self.accum(grads, *x, Tensor::from_vec(xs, dx)?);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    tensor::gemm(m, n, k, go, false, self.value(*b).data(), true, &mut da, 0.0);
                    self.accum(grads, *a, Tensor::from_vec(sa, da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::gemm(k, m, n, self.value(*a).data(), true, go, false, &mut db, 0.0);
                    self.accum(grads, *b, Tensor::from_vec(sb, db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (bsz, in_f, out_f) = (sx[0], sx[1], sw[0]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; bsz * in_f];
                    tensor::gemm(bsz, out_f, in_f, go, false, self.value(*w).data(), false, &mut dx, 0.0);
                    self.accum(grads, *x, Tensor::from_vec(sx, dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; out_f * in_f];
                    tensor::gemm(out_f, bsz, in_f, go, true, self.value(*x).data(), false, &mut dw, 0.0);
                    self.accum(grads, *w, Tensor::from_vec(sw, dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; out_f];
                    for row in go.chunks(out_f) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accum(grads, *b, Tensor::from_vec(&[out_f], db)?);
                }
            }
            Op::ChannelWeightedSum { f, alpha } => {
                let fs = self.shape(*f);
                let (bsz, k, hw) = (fs[0], fs[1], fs[2] * fs[3]);
                let fv = self.value(*f).data();
                let av = self.value(*alpha).data();
                if self.needs(*f) {
                    let mut df = vec![0.0; fv.len()];
                    for b in 0..bsz {
                        let g = &go[b * hw..(b + 1) * hw];
                        for (ch, &a) in av.iter().enumerate() {
                            let dst = &mut df[(b * k + ch) * hw..(b * k + ch + 1) * hw];
                            for (d, gi) in dst.iter_mut().zip(g) {
                                *d = a * gi;
                            }
                        }
                    }
                    self.accum(grads, *f, Tensor::from_vec(fs, df)?);
                }
                if self.needs(*alpha) {
                    let mut da = vec![0.0; k];
                    for b in 0..bsz {
                        let g = &go[b * hw..(b + 1) * hw];
                        for (ch, d) in da.iter_mut().enumerate() {
                            let src = &fv[(b * k + ch) * hw..(b * k + ch + 1) * hw];
                            *d += src.iter().zip(g).map(|(s, gi)| s * gi).sum::<f64>();
                        }
                    }
                    self.accum(grads, *alpha, Tensor::from_vec(&[k], da)?);
                }
            }
            Op::SpatialMean(g) => {
                let gs = self.shape(*g);
                let hw = gs[1] * gs[2];
                let data: Vec<f64> = go.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
                self.accum(grads, *g, Tensor::from_vec(gs, data)?);
            }
            Op::MinMaxNormalize { x, stats } => {
                let xs = self.shape(*x);
                let xv = self.value(*x).data();
                let n: usize = xs[1..].iter().product();
                let mut dx = vec![0.0; xv.len()];
                for (item, st) in stats.iter().enumerate() {
                    let Some((lo, hi, range)) = *st else { continue };
                    let src = &xv[item * n..(item + 1) * n];
                    let g = &go[item * n..(item + 1) * n];
                    let dst = &mut dx[item * n..(item + 1) * n];
                    let (mn, mx) = (src[lo], src[hi]);
                    let mut dmin = 0.0;
                    let mut dmax = 0.0;
                    for i in 0..n {
                        dst[i] += g[i] / range;
                        dmin += g[i] * (src[i] - mx) / (range * range);
                        dmax -= g[i] * (src[i] - mn) / (range * range);
                    }
                    dst[lo] += dmin;
                    dst[hi] += dmax;
                }
                self.accum(grads, *x, Tensor::from_vec(xs, dx)?);
            }
            Op::Bce { pred, target, eps } => {
                let p = self.value(*pred);
                let n = p.len() as f64;
                let g0 = go[0];
                let (lo, hi) = (*eps, 1.0 - eps);
                let d = p.zip_map(target, |q, t| {
                    if q > lo && q < hi {
                        g0 * (q - t) / (q * (1.0 - q)) / n
                    } else {
                        0.0
                    }
                });
                self.accum(grads, *pred, d);
            }
            Op::KlStdNormal { mu, logvar } => {
                let bsz = self.shape(*mu).first().copied().unwrap_or(1).max(1) as f64;
                let g0 = go[0] / bsz;
                if self.needs(*mu) {
                    self.accum(grads, *mu, self.value(*mu).map(|m| g0 * m));
                }
                if self.needs(*logvar) {
                    self.accum(grads, *logvar, self.value(*logvar).map(|lv| g0 * 0.5 * (lv.exp() - 1.0)));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                eps,
            } => {
                let classes = self.shape(*logits)[1];
                let g0 = go[0] / labels.len() as f64;
                let mut d = vec![0.0; probs.len()];
                for (i, &y) in labels.iter().enumerate() {
                    if probs[i * classes + y] < *eps {
                        continue;
                    }
                    for c in 0..classes {
                        let ind = if c == y { 1.0 } else { 0.0 };
                        d[i * classes + c] = g0 * (probs[i * classes + c] - ind);
                    }
                }
                self.accum(grads, *logits, Tensor::from_vec(self.shape(*logits), d)?);
            }
            Op::WeightedItemMean { x, weights } => {
                let xs = self.shape(*x);
                let n: usize = xs[1..].iter().product();
                let bsz = weights.len() as f64;
                let data: Vec<f64> = weights
                    .iter()
                    .flat_map(|w| std::iter::repeat_n(go[0] * w / (n as f64 * bsz), n))
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(xs, data)?);
            }
        }
        Ok(())
    }
}
