use super::tape::Op;
use super::{Result, Scalar, Tape, Tensor, TensorError, Var};

/// Spatial output extent of a convolution or pooling window.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one `[C, H, W]` image into `[C*kh*kw, out_h*out_w]`.
    fn im2col<S: Scalar>(&self, image: &[S], cols: &mut [S]) {
        let n_cols = self.col_cols();
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(S::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, slot) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *slot = if ix < 0 || ix >= self.width as isize { S::zero() } else { src[ix as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds columns back onto a `[C, H, W]` image gradient.
    fn col2im<S: Scalar>(&self, cols: &[S], image: &mut [S]) {
        let n_cols = self.col_cols();
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                line[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<(usize, usize, Geometry)> {
    let (&[n, c, h, wd], &[f, c2, kh, kw]) = (x, w) else {
        return Err(TensorError::shape("conv2d", format!("input {x:?}, kernel {w:?} must both be 4-d")));
    };
    if stride == 0 {
        return Err(TensorError::argument("conv2d", "stride must be positive"));
    }
    if c != c2 {
        return Err(TensorError::shape("conv2d", format!("input has {c} channels, kernel expects {c2}")));
    }
    let (Some(out_h), Some(out_w)) =
        (conv2d_output_size(h, kh, stride, padding), conv2d_output_size(wd, kw, stride, padding))
    else {
        return Err(TensorError::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, wd + 2 * padding),
        ));
    };
    Ok((n, f, Geometry { channels: c, height: h, width: wd, kh, kw, out_h, out_w, stride, padding }))
}

impl<S: Scalar> Tape<S> {
    /// Cross-correlation of `x: [N, C, H, W]` with `w: [F, C, kh, kw]` plus bias `b: [F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (vx, vw, vb) = (self.val(ix), self.val(iw), self.val(ib));
        let (n, f, geo) = geometry(vx.shape(), vw.shape(), stride, padding)?;
        if vb.shape() != [f] {
            return Err(TensorError::shape("conv2d", format!("bias {:?} for {f} filters", vb.shape())));
        }
        let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
        let in_size = geo.channels * geo.height * geo.width;
        let out_size = f * cols_n;
        let mut cols = vec![S::zero(); rows * cols_n];
        let mut out = vec![S::zero(); n * out_size];
        for i in 0..n {
            geo.im2col(&vx.data()[i * in_size..(i + 1) * in_size], &mut cols);
            let dst = &mut out[i * out_size..(i + 1) * out_size];
            for (row, &bias) in dst.chunks_mut(cols_n).zip(vb.data()) {
                row.fill(bias);
            }
            S::gemm(f, rows, cols_n, S::one(), vw.data(), (rows, 1), &cols, (cols_n, 1), S::one(), dst, (cols_n, 1));
        }
        let out = Tensor::new([n, f, geo.out_h, geo.out_w], out)?;
        self.push(out, Op::Conv2d { x: ix, w: iw, b: ib, stride, padding })
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<S: Scalar>(
    (ix, x): (usize, &Tensor<S>),
    (iw, w): (usize, &Tensor<S>),
    ib: usize,
    stride: usize,
    padding: usize,
    g: &Tensor<S>,
    need_x: bool,
    need_params: bool,
) -> Vec<(usize, Tensor<S>)> {
    let (n, f, geo) = geometry(x.shape(), w.shape(), stride, padding).expect("validated in forward");
    let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
    let in_size = geo.channels * geo.height * geo.width;
    let out_size = f * cols_n;
    let mut cols = vec![S::zero(); rows * cols_n];
    let mut dw = vec![S::zero(); f * rows];
    let mut db = vec![S::zero(); f];
    let mut dx = if need_x { vec![S::zero(); n * in_size] } else { Vec::new() };
    for i in 0..n {
        let gi = &g.data()[i * out_size..(i + 1) * out_size];
        if need_params {
            geo.im2col(&x.data()[i * in_size..(i + 1) * in_size], &mut cols);
            S::gemm(f, cols_n, rows, S::one(), gi, (cols_n, 1), &cols, (1, cols_n), S::one(), &mut dw, (rows, 1));
            for (acc, row) in db.iter_mut().zip(gi.chunks(cols_n)) {
                *acc += row.iter().copied().sum::<S>();
            }
        }
        if need_x {
            S::gemm(rows, f, cols_n, S::one(), w.data(), (1, rows), gi, (cols_n, 1), S::zero(), &mut cols, (cols_n, 1));
            geo.col2im(&cols, &mut dx[i * in_size..(i + 1) * in_size]);
        }
    }
    let mut out = Vec::with_capacity(3);
    if need_x {
        out.push((ix, Tensor::new(x.shape(), dx).unwrap()));
    }
    if need_params {
        out.push((iw, Tensor::new(w.shape(), dw).unwrap()));
        out.push((ib, Tensor::new([f], db).unwrap()));
    }
    out
}
