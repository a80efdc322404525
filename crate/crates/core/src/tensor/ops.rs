use super::tape::Op;
use super::{Result, Scalar, Tape, Tensor, TensorError, Var};

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes already checked")
}

impl<S: Scalar> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        same_shape("add", self.val(ia), self.val(ib))?;
        let out = zip_map(self.val(ia), self.val(ib), |x, y| x + y);
        self.push(out, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        same_shape("sub", self.val(ia), self.val(ib))?;
        let out = zip_map(self.val(ia), self.val(ib), |x, y| x - y);
        self.push(out, Op::Sub(ia, ib))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        same_shape("mul", self.val(ia), self.val(ib))?;
        let out = zip_map(self.val(ia), self.val(ib), |x, y| x * y);
        self.push(out, Op::Mul(ia, ib))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.val(ix).map(|v| v * factor);
        self.push(out, Op::Scale(ix, factor))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        let sa = va.shape();
        let sb = vb.shape();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::shape("add_broadcast", format!("{sb:?} is not a suffix of {sa:?}")));
        }
        let block = vb.numel();
        let mut out = va.clone();
        if block > 0 {
            for chunk in out.data_mut().chunks_mut(block) {
                for (o, &bv) in chunk.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
        }
        self.push(out, Op::AddBroadcast(ia, ib))
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        let ix = self.check(x)?;
        if n == 0 {
            return Err(TensorError::argument("expand", "repeat count must be positive"));
        }
        let v = self.val(ix);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let mut data = Vec::with_capacity(v.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::new(shape, data)?, Op::Expand(ix))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.val(ix).sum();
        self.push(Tensor::scalar(s), Op::Sum(ix))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix);
        if v.numel() == 0 {
            return Err(TensorError::argument("mean", "empty tensor"));
        }
        let m = v.sum() / S::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(ix))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        let (m, k, n) = match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), va.data(), (k, 1), vb.data(), (n, 1), S::zero(), &mut out, (n, 1));
        self.push(Tensor::new([m, n], out)?, Op::MatMul(ia, ib))
    }

    /// Batched product `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T`
    /// when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        let dims = match (va.shape(), vb.shape()) {
            (&[ba, m, k], &[bb, k2, n]) if ba == bb && !transpose_b && k == k2 => Some((ba, m, k, n)),
            (&[ba, m, k], &[bb, n, k2]) if ba == bb && transpose_b && k == k2 => Some((ba, m, k, n)),
            _ => None,
        };
        let Some((batch, m, k, n)) = dims else {
            return Err(TensorError::shape(
                "batch_matmul",
                format!("{:?} x {:?} (transpose_b = {transpose_b})", va.shape(), vb.shape()),
            ));
        };
        let b_strides = if transpose_b { (1, k) } else { (n, 1) };
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                &va.data()[i * m * k..],
                (k, 1),
                &vb.data()[i * k * n..],
                b_strides,
                S::zero(),
                &mut out[i * m * n..],
                (n, 1),
            );
        }
        self.push(Tensor::new([batch, m, n], out)?, Op::BatchMatMul { a: ia, b: ib, transpose_b })
    }

    /// Affine map `x w^T + b` for `x: [N, D_in]`, `w: [D_out, D_in]`, `b: [D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (vx, vw, vb) = (self.val(ix), self.val(iw), self.val(ib));
        let (n, d_in, d_out) = match (vx.shape(), vw.shape(), vb.shape()) {
            (&[n, d_in], &[d_out, d_in2], &[d_out2]) if d_in == d_in2 && d_out == d_out2 => {
                (n, d_in, d_out)
            }
            (sx, sw, sb) => {
                return Err(TensorError::shape("linear", format!("input {sx:?}, weight {sw:?}, bias {sb:?}")))
            }
        };
        let mut out = Vec::with_capacity(n * d_out);
        for _ in 0..n {
            out.extend_from_slice(vb.data());
        }
        S::gemm(n, d_in, d_out, S::one(), vx.data(), (d_in, 1), vw.data(), (1, d_in), S::one(), &mut out, (d_out, 1));
        self.push(Tensor::new([n, d_out], out)?, Op::Linear { x: ix, w: iw, b: ib })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let out = self.val(ix).clone().reshape(shape)?;
        self.push(out, Op::Reshape(ix))
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let Some((&n, rest)) = shape.split_first() else {
            return Err(TensorError::argument("flatten", "scalar input"));
        };
        self.reshape(x, &[n, rest.iter().product()])
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix);
        let mut seen = vec![false; v.ndim()];
        if perm.len() != v.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::argument("permute", format!("{perm:?} is not a permutation of {} axes", v.ndim())));
        }
        let out = permute_values(v, perm);
        self.push(out, Op::Permute { x: ix, perm: perm.to_vec() })
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix);
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::argument(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.push(Tensor::new(out_shape, data)?, Op::Narrow { x: ix, axis, start })
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let indices = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = indices.first() else {
            return Err(TensorError::argument("concat", "no inputs"));
        };
        let base = self.val(first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::argument("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &i in &indices {
            let s = self.val(i).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &indices {
                let v = self.val(i);
                let rows = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * rows..(o + 1) * rows]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::new(shape, data)?, Op::Concat { parts: indices, axis })
    }
}

pub(super) fn mul_backward<S: Scalar>(
    ia: usize,
    a: &Tensor<S>,
    ib: usize,
    b: &Tensor<S>,
    g: &Tensor<S>,
) -> Vec<(usize, Tensor<S>)> {
    vec![(ia, zip_map(g, b, |d, y| d * y)), (ib, zip_map(g, a, |d, x| d * x))]
}

pub(super) fn add_broadcast_backward<S: Scalar>(
    ia: usize,
    ib: usize,
    b: &Tensor<S>,
    g: &Tensor<S>,
) -> Vec<(usize, Tensor<S>)> {
    vec![(ia, g.clone()), (ib, sum_leading(g, b.shape()))]
}

/// Sums `g` over leading blocks so the result has `target` shape.
pub(super) fn sum_leading<S: Scalar>(g: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    let mut acc = Tensor::zeros(target);
    let block = acc.numel();
    if block > 0 {
        for chunk in g.data().chunks(block) {
            for (a, &d) in acc.data_mut().iter_mut().zip(chunk) {
                *a += d;
            }
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
pub(super) fn matmul_backward<S: Scalar>(
    ia: usize,
    a: &Tensor<S>,
    ib: usize,
    b: &Tensor<S>,
    g: &Tensor<S>,
    need_a: bool,
    need_b: bool,
) -> Vec<(usize, Tensor<S>)> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Vec::new();
    if need_a {
        let mut da = vec![S::zero(); m * k];
        S::gemm(m, n, k, S::one(), g.data(), (n, 1), b.data(), (1, n), S::zero(), &mut da, (k, 1));
        out.push((ia, Tensor::new([m, k], da).unwrap()));
    }
    if need_b {
        let mut db = vec![S::zero(); k * n];
        S::gemm(k, m, n, S::one(), a.data(), (1, k), g.data(), (n, 1), S::zero(), &mut db, (n, 1));
        out.push((ib, Tensor::new([k, n], db).unwrap()));
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn bmm_backward<S: Scalar>(
    ia: usize,
    a: &Tensor<S>,
    ib: usize,
    b: &Tensor<S>,
    transpose_b: bool,
    g: &Tensor<S>,
    need_a: bool,
    need_b: bool,
) -> Vec<(usize, Tensor<S>)> {
    let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = g.shape()[2];
    // Strides of the logical [k, n] right operand inside b's storage.
    let bs = if transpose_b { (1, k) } else { (n, 1) };
    let mut out = Vec::new();
    if need_a {
        let mut da = vec![S::zero(); batch * m * k];
        for i in 0..batch {
            S::gemm(
                m,
                n,
                k,
                S::one(),
                &g.data()[i * m * n..],
                (n, 1),
                &b.data()[i * k * n..],
                (bs.1, bs.0),
                S::zero(),
                &mut da[i * m * k..],
                (k, 1),
            );
        }
        out.push((ia, Tensor::new([batch, m, k], da).unwrap()));
    }
    if need_b {
        let mut db = vec![S::zero(); batch * k * n];
        for i in 0..batch {
            S::gemm(
                k,
                m,
                n,
                S::one(),
                &a.data()[i * m * k..],
                (1, k),
                &g.data()[i * m * n..],
                (n, 1),
                S::zero(),
                &mut db[i * k * n..],
                bs,
            );
        }
        out.push((ib, Tensor::new(b.shape(), db).unwrap()));
    }
    out
}

pub(super) fn linear_backward<S: Scalar>(
    (ix, x): (usize, &Tensor<S>),
    (iw, w): (usize, &Tensor<S>),
    ib: usize,
    g: &Tensor<S>,
    need_x: bool,
) -> Vec<(usize, Tensor<S>)> {
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = w.shape()[0];
    let mut out = Vec::with_capacity(3);
    if need_x {
        let mut dx = vec![S::zero(); n * d_in];
        S::gemm(n, d_out, d_in, S::one(), g.data(), (d_out, 1), w.data(), (d_in, 1), S::zero(), &mut dx, (d_in, 1));
        out.push((ix, Tensor::new([n, d_in], dx).unwrap()));
    }
    let mut dw = vec![S::zero(); d_out * d_in];
    S::gemm(d_out, n, d_in, S::one(), g.data(), (1, d_out), x.data(), (d_in, 1), S::zero(), &mut dw, (d_in, 1));
    out.push((iw, Tensor::new([d_out, d_in], dw).unwrap()));
    let mut db = vec![S::zero(); d_out];
    for row in g.data().chunks(d_out) {
        for (acc, &d) in db.iter_mut().zip(row) {
            *acc += d;
        }
    }
    out.push((ib, Tensor::new([d_out], db).unwrap()));
    out
}

pub(super) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(super) fn permute_values<S: Scalar>(v: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let shape = v.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = v.numel();
    let mut data = Vec::with_capacity(numel);
    if numel > 0 {
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        let src = v.data();
        let last = rank.saturating_sub(1);
        let (inner_len, inner_stride) = if rank == 0 { (1, 0) } else { (out_shape[last], strides[last]) };
        loop {
            for j in 0..inner_len {
                data.push(src[offset + j * inner_stride]);
            }
            // Advance all axes except the innermost.
            let mut d = last;
            loop {
                if d == 0 {
                    return Tensor::new(out_shape, data).unwrap();
                }
                d -= 1;
                idx[d] += 1;
                offset += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

pub(super) fn narrow_backward<S: Scalar>(
    in_shape: &[usize],
    axis: usize,
    start: usize,
    g: &Tensor<S>,
) -> Tensor<S> {
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let dim = in_shape[axis];
    let len = g.shape()[axis];
    let mut d = Tensor::zeros(in_shape);
    let dd = d.data_mut();
    for o in 0..outer {
        let dst = (o * dim + start) * inner;
        let src = o * len * inner;
        dd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    d
}

pub(super) fn concat_backward<'a, S: Scalar>(
    parts: &[usize],
    shape_of: impl Fn(usize) -> &'a [usize],
    axis: usize,
    g: &Tensor<S>,
) -> Vec<(usize, Tensor<S>)> {
    let gs = g.shape();
    let outer: usize = gs[..axis].iter().product();
    let inner: usize = gs[axis + 1..].iter().product();
    let total = gs[axis];
    let mut offset = 0;
    let mut out = Vec::with_capacity(parts.len());
    for &p in parts {
        let shape = shape_of(p);
        let len = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + offset) * inner;
            data.extend_from_slice(&g.data()[base..base + len * inner]);
        }
        out.push((p, Tensor::new(shape, data).unwrap()));
        offset += len;
    }
    out
}
