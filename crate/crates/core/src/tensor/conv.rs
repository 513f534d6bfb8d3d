use super::{gemm, shape_err, Backward, GradSink, MatRef, Result, Scalar, Tape, Tensor, Var};

/// Output length of a convolution or pooling window sweep:
/// `floor((n + 2·pad − k) / stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > n + 2 * pad {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

/// Kernel, stride and padding along height and width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
        }
    }
}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    oh: usize,
    ow: usize,
    g: ConvGeom,
}

impl Dims {
    fn patch(&self) -> usize {
        self.c * self.g.kh * self.g.kw
    }
    fn cols(&self) -> usize {
        self.b * self.oh * self.ow
    }
}

/// Unfold input patches into a `[C·kh·kw, B·oh·ow]` matrix.
fn im2col<T: Scalar>(x: &[T], d: &Dims) -> Vec<T> {
    let g = d.g;
    let p = d.oh * d.ow;
    let ncols = d.cols();
    let mut cols = vec![T::zero(); d.patch() * ncols];
    for c in 0..d.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..d.b {
                    let plane = &x[(b * d.c + c) * d.h * d.w..(b * d.c + c + 1) * d.h * d.w];
                    for oy in 0..d.oh {
                        let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let dst = &mut dst_row[b * p + oy * d.ow..b * p + (oy + 1) * d.ow];
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                            if ix >= 0 && ix < d.w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch matrix back onto the input layout, summing overlaps.
fn col2im<T: Scalar>(cols: &[T], d: &Dims, dx: &mut [T]) {
    let g = d.g;
    let p = d.oh * d.ow;
    let ncols = d.cols();
    for c in 0..d.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..d.b {
                    let plane = &mut dx[(b * d.c + c) * d.h * d.w..(b * d.c + c + 1) * d.h * d.w];
                    for oy in 0..d.oh {
                        let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                        let src = &src_row[b * p + oy * d.ow..b * p + (oy + 1) * d.ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dRule {
    dims: Dims,
}

impl<T: Scalar> Backward<T> for Conv2dRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        let d = self.dims;
        let p = d.oh * d.ow;
        let ncols = d.cols();
        // [B, F, P] -> [F, B·P]
        let mut dmat = vec![T::zero(); d.f * ncols];
        for b in 0..d.b {
            for f in 0..d.f {
                dmat[f * ncols + b * p..f * ncols + (b + 1) * p]
                    .copy_from_slice(&grad[(b * d.f + f) * p..(b * d.f + f + 1) * p]);
            }
        }
        let dmat_ref = MatRef::new(&dmat, d.f, ncols);
        let kernel = inputs[1].data();
        if sink.wants(1) {
            let cols = im2col(inputs[0].data(), &d);
            sink.accumulate(1, |g| gemm(dmat_ref, MatRef::new(&cols, d.patch(), ncols).t(), g, true));
        }
        if sink.wants(0) {
            let mut dcols = vec![T::zero(); d.patch() * ncols];
            gemm(MatRef::new(kernel, d.f, d.patch()).t(), dmat_ref, &mut dcols, false);
            sink.accumulate(0, |g| col2im(&dcols, &d, g));
        }
        if inputs.len() == 3 {
            sink.accumulate(2, |g| {
                for (f, g) in g.iter_mut().enumerate() {
                    *g += dmat[f * ncols..(f + 1) * ncols].iter().copied().sum();
                }
            });
        }
    }
}

struct MaxPoolRule {
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) {
        sink.accumulate(0, |g| {
            for (&i, &d) in self.argmax.iter().zip(grad) {
                g[i] += d;
            }
        });
    }
}

impl<T: Scalar> Tape<T> {
    /// 2-D cross-correlation of `x: [B, C, H, W]` with `k: [F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_err("conv2d", format!("need rank-4 input and kernel, got {xs:?} and {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channels (axis 1 of {xs:?}) != kernel channels (axis 1 of {ks:?})"),
            ));
        }
        let g = ConvGeom { kh: ks[2], kw: ks[3], ..geom };
        let oh = conv_out_len(xs[2], g.kh, g.sh, g.ph)
            .ok_or_else(|| shape_err("conv2d", format!("kernel height {} exceeds padded input height {} (axis 2)", g.kh, xs[2] + 2 * g.ph)))?;
        let ow = conv_out_len(xs[3], g.kw, g.sw, g.pw)
            .ok_or_else(|| shape_err("conv2d", format!("kernel width {} exceeds padded input width {} (axis 3)", g.kw, xs[3] + 2 * g.pw)))?;
        let d = Dims { b: xs[0], c: xs[1], h: xs[2], w: xs[3], f: ks[0], oh, ow, g };
        if let Some(b) = bias {
            if self.shape(b) != [d.f] {
                return Err(shape_err("conv2d", format!("bias {:?} must be [{}]", self.shape(b), d.f)));
            }
        }
        let cols = im2col(self.data(x), &d);
        let ncols = d.cols();
        let mut mat = vec![T::zero(); d.f * ncols];
        gemm(
            MatRef::new(self.data(k), d.f, d.patch()),
            MatRef::new(&cols, d.patch(), ncols),
            &mut mat,
            false,
        );
        drop(cols);
        let p = oh * ow;
        let mut out = vec![T::zero(); d.b * d.f * p];
        let bias_vals = bias.map(|b| self.data(b).to_vec());
        for b in 0..d.b {
            for f in 0..d.f {
                let dst = &mut out[(b * d.f + f) * p..(b * d.f + f + 1) * p];
                dst.copy_from_slice(&mat[f * ncols + b * p..f * ncols + (b + 1) * p]);
                if let Some(bv) = &bias_vals {
                    dst.iter_mut().for_each(|v| *v += bv[f]);
                }
            }
        }
        let out = Tensor { shape: vec![d.b, d.f, oh, ow], data: out };
        let inputs: Vec<Var> = [Some(x), Some(k), bias].into_iter().flatten().collect();
        Ok(self.push(out, &inputs, Box::new(Conv2dRule { dims: d })))
    }

    /// 1-D cross-correlation of `x: [B, C, T]` with `k: [F, C, kt]`.
    pub fn conv1d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 3 {
            return Err(shape_err("conv1d", format!("need rank-3 input and kernel, got {xs:?} and {ks:?}")));
        }
        if ks[2] > xs[2] + 2 * pad {
            return Err(shape_err("conv1d", format!("kernel length {} exceeds padded input length {} (axis 2)", ks[2], xs[2] + 2 * pad)));
        }
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
        let k4 = self.reshape(k, &[ks[0], ks[1], 1, ks[2]])?;
        let geom = ConvGeom { kh: 1, kw: ks[2], sh: 1, sw: stride, ph: 0, pw: pad };
        let y = self.conv2d(x4, k4, bias, geom)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3]])
    }

    /// Max pooling over `[B, C, H, W]` with a square window, no padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("max_pool2d", format!("need [B, C, H, W], got {s:?}")));
        }
        let oh = conv_out_len(s[2], k, stride, 0)
            .ok_or_else(|| shape_err("max_pool2d", format!("window {k} exceeds height {} (axis 2)", s[2])))?;
        let ow = conv_out_len(s[3], k, stride, 0)
            .ok_or_else(|| shape_err("max_pool2d", format!("window {k} exceeds width {} (axis 3)", s[3])))?;
        let (h, w) = (s[2], s[3]);
        let src = self.data(x);
        let planes = s[0] * s[1];
        let mut data = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor { shape: vec![s[0], s[1], oh, ow], data };
        Ok(self.push(out, &[x], Box::new(MaxPoolRule { argmax })))
    }
}
