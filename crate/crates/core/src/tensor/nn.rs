use super::tape::Op;
use super::{Result, Scalar, Tape, Tensor, TensorError, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tape<S> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.val(ix).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(out, Op::Relu(ix))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.val(ix).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(ix))
    }

    /// Softmax along `axis`, shifted by the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix);
        if axis >= v.ndim() {
            return Err(TensorError::argument("softmax", format!("axis {axis} for shape {:?}", v.shape())));
        }
        let out = softmax_values(v, axis);
        self.push(out, Op::Softmax { x: ix, axis })
    }

    /// Max pooling over `[N, C, H, W]`; the gradient goes to the first maximum in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix);
        let &[n, c, h, w] = v.shape() else {
            return Err(TensorError::shape("max_pool2d", format!("expected 4-d input, got {:?}", v.shape())));
        };
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(TensorError::argument(
                "max_pool2d",
                format!("window {window} stride {stride} on {h}x{w} input"),
            ));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let src = v.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + oy * stride * w + ox * stride;
                    let mut best = src[best_idx];
                    for ky in 0..window {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..window {
                            if src[row + kx] > best {
                                best = src[row + kx];
                                best_idx = row + kx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
        let out = Tensor::new([n, c, oh, ow], out)?;
        self.push(out, Op::MaxPool2d { x: ix, argmax })
    }

    /// Spatial mean of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix);
        let &[n, c, h, w] = v.shape() else {
            return Err(TensorError::shape("global_avg_pool2d", format!("expected 4-d input, got {:?}", v.shape())));
        };
        let area = S::from_f64((h * w) as f64);
        let data = v.data().chunks(h * w).map(|p| p.iter().copied().sum::<S>() / area).collect();
        self.push(Tensor::new([n, c], data)?, Op::GlobalAvgPool(ix))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (v, vg, vb) = (self.val(ix), self.val(ig), self.val(ib));
        let Some(&d) = v.shape().last() else {
            return Err(TensorError::shape("layer_norm", "scalar input"));
        };
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for feature size {d}", vg.shape(), vb.shape()),
            ));
        }
        let dn = S::from_f64(d as f64);
        let eps = S::from_f64(LAYER_NORM_EPS);
        let mut normalized = Vec::with_capacity(v.numel());
        let mut rstd = Vec::with_capacity(v.numel() / d.max(1));
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<S>() / dn;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((&t, &gm), &bt) in row.iter().zip(vg.data()).zip(vb.data()) {
                let xh = (t - mean) * r;
                normalized.push(xh);
                out.push(xh * gm + bt);
            }
        }
        let out = Tensor::new(v.shape(), out)?;
        self.push(out, Op::LayerNorm { x: ix, gamma: ig, beta: ib, normalized, rstd })
    }

    /// Mean two-class softmax cross-entropy of `logits: [N, 2]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let v = self.val(il);
        let &[n, k] = v.shape() else {
            return Err(TensorError::shape("cross_entropy", format!("expected [N, 2] logits, got {:?}", v.shape())));
        };
        if k != 2 {
            return Err(TensorError::shape("cross_entropy", format!("expected 2 classes, got {k}")));
        }
        if labels.len() != n || n == 0 {
            return Err(TensorError::argument("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::argument("cross_entropy", format!("label {bad} out of range 0..{k}")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = S::zero();
        for (row, &label) in v.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let sum_exp: S = row.iter().map(|&z| (z - max).exp()).sum();
            let log_sum = max + sum_exp.ln();
            total += log_sum - row[label];
            probs.extend(row.iter().map(|&z| (z - max).exp() / sum_exp));
        }
        let loss = total / S::from_f64(n as f64);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits: il, labels: labels.to_vec(), probs })
    }
}

/// (gelu(x), d gelu / dx)
fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = S::from_f64(0.044_715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (S::one() + t);
    let deriv = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x);
    (value, deriv)
}

pub(super) fn gelu_backward<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let data = x.data().iter().zip(g.data()).map(|(&v, &d)| d * gelu_parts(v).1).collect();
    Tensor::new(x.shape(), data).unwrap()
}

pub(crate) fn softmax_values<S: Scalar>(v: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, dim, inner) = axis_split(v.shape(), axis);
    let src = v.data();
    let mut out = vec![S::zero(); v.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| (o * dim + d) * inner + i;
            let max = (0..dim).map(|d| src[at(d)]).fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for d in 0..dim {
                let e = (src[at(d)] - max).exp();
                out[at(d)] = e;
                sum += e;
            }
            for d in 0..dim {
                out[at(d)] /= sum;
            }
        }
    }
    Tensor::new(v.shape(), out).unwrap()
}

pub(super) fn softmax_backward<S: Scalar>(y: &Tensor<S>, g: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, dim, inner) = axis_split(y.shape(), axis);
    let (ys, gs) = (y.data(), g.data());
    let mut dx = vec![S::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |d: usize| (o * dim + d) * inner + i;
            let dot: S = (0..dim).map(|d| ys[at(d)] * gs[at(d)]).sum();
            for d in 0..dim {
                dx[at(d)] = ys[at(d)] * (gs[at(d)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx).unwrap()
}

pub(super) fn global_avg_pool_backward<S: Scalar>(in_shape: &[usize], g: &Tensor<S>) -> Tensor<S> {
    let area = in_shape[2] * in_shape[3];
    let scale = S::one() / S::from_f64(area as f64);
    let mut data = Vec::with_capacity(g.numel() * area);
    for &d in g.data() {
        data.extend(std::iter::repeat_n(d * scale, area));
    }
    Tensor::new(in_shape, data).unwrap()
}

pub(super) fn layer_norm_backward<S: Scalar>(
    (ix, ig, ib): (usize, usize, usize),
    gamma: &Tensor<S>,
    normalized: &[S],
    rstd: &[S],
    g: &Tensor<S>,
) -> Vec<(usize, Tensor<S>)> {
    let d = gamma.numel();
    let dn = S::from_f64(d as f64);
    let mut dx = Vec::with_capacity(g.numel());
    let mut dgamma = vec![S::zero(); d];
    let mut dbeta = vec![S::zero(); d];
    for ((grow, xrow), &r) in g.data().chunks(d).zip(normalized.chunks(d)).zip(rstd) {
        let mut sum_gx = S::zero();
        let mut sum_gx_xh = S::zero();
        for j in 0..d {
            let gx = grow[j] * gamma.data()[j];
            sum_gx += gx;
            sum_gx_xh += gx * xrow[j];
            dgamma[j] += grow[j] * xrow[j];
            dbeta[j] += grow[j];
        }
        for j in 0..d {
            let gx = grow[j] * gamma.data()[j];
            dx.push(r / dn * (dn * gx - sum_gx - xrow[j] * sum_gx_xh));
        }
    }
    vec![
        (ix, Tensor::new(g.shape(), dx).unwrap()),
        (ig, Tensor::new([d], dgamma).unwrap()),
        (ib, Tensor::new([d], dbeta).unwrap()),
    ]
}

pub(super) fn cross_entropy_backward<S: Scalar>(
    shape: &[usize],
    labels: &[usize],
    probs: &[S],
    upstream: S,
) -> Tensor<S> {
    let k = shape[1];
    let scale = upstream / S::from_f64(labels.len() as f64);
    let mut d: Vec<S> = probs.iter().map(|&p| p * scale).collect();
    for (row, &label) in labels.iter().enumerate() {
        d[row * k + label] -= scale;
    }
    Tensor::new(shape, d).unwrap()
}
